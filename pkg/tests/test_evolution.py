"""The (1+1) evolution loop, scripted end to end against the mock endpoint."""

import json

import pytest

from skillforge import workspace as ws
from skillforge.evolution import (
    EMPTY_HISTORY_MARKER,
    EvolutionRunner,
    Limits,
    RunConfig,
    RunFailedError,
    summarize_db,
)
from skillforge.mock_server import MockConfig, MockRule
from skillforge.model import (
    ContextArtifact,
    MetricKind,
    MetricScore,
    RecordStatus,
    SkillDatabase,
    SkillRecord,
    SplitKind,
)

from conftest import leveled_generator, make_split, offline_script, toy_spec


def build_runner(tmp_path, factory, gateway, rules, config=None, n_train=20):
    train = make_split(SplitKind.TRAIN, n_train)
    layout = ws.init_workspace(tmp_path / "run", train)
    _, endpoint = factory(MockConfig(rules=rules))
    runner = EvolutionRunner(
        layout=layout,
        spec=toy_spec(),
        gateway=gateway,
        agentic_endpoint=endpoint,
        generator_endpoint=endpoint,
        config=config or RunConfig(iterations=3),
        limits=Limits(rollout_workers=8),
    )
    return runner, layout


class TestOfflineRun:
    def test_three_iterations_improving(self, tmp_path, gateway, mock_endpoint_factory):
        runner, layout = build_runner(
            tmp_path, mock_endpoint_factory, gateway, offline_script(3)
        )
        train = make_split(SplitKind.TRAIN, 20)
        val = make_split(SplitKind.VAL, 10)
        best, db = runner.run_offline(train, val)

        assert [r.status for r in db.records] == [RecordStatus.OK] * 3
        # leveled generator: train 5/10/15 of 20, val 3/6/8 of 10
        assert [round(r.train_score.value, 3) for r in db.records] == [0.25, 0.5, 0.75]
        assert [round(r.val_score.value, 3) for r in db.records] == [0.3, 0.6, 0.8]
        assert best.iteration == 3
        db.check_invariants()

        entries = ws.read_evaluations(layout)
        assert len(entries) == 3
        assert all(e["status"] == "ok" for e in entries)

        # skills archived per iteration
        for k in (1, 2, 3):
            assert (layout.skills_dir / f"iter{k}" / "SKILL.md").is_file()

    def test_warm_start_digests_match_prior_best_artifacts(
        self, tmp_path, gateway, mock_endpoint_factory
    ):
        runner, layout = build_runner(
            tmp_path, mock_endpoint_factory, gateway, offline_script(3)
        )
        _, db = runner.run_offline(make_split(SplitKind.TRAIN, 20), make_split(SplitKind.VAL, 10))
        entries = ws.read_evaluations(layout)
        for k in (2, 3):
            prior_best = db.records[k - 2]
            expected = ws.artifact_digest(layout, prior_best.artifact)
            assert entries[k - 1]["warm_start_digest"] == expected

    def test_incumbent_retained_when_offspring_regresses(
        self, tmp_path, gateway, mock_endpoint_factory
    ):
        # levels go 3 -> 1: iteration 2's artifact scores worse on val
        rules = offline_script(2)
        for rule in rules:
            if isinstance(rule.response, list):
                args = rule.response[0]["arguments"]
                if args["file_path"] == "context/knowledge.md":
                    args["content"] = args["content"].replace("LEVEL 1", "LEVEL 3")
                    args["content"] = args["content"].replace("LEVEL 2", "LEVEL 1")
        runner, layout = build_runner(
            tmp_path, mock_endpoint_factory, gateway, rules, config=RunConfig(iterations=2)
        )
        best, db = runner.run_offline(make_split(SplitKind.TRAIN, 20), make_split(SplitKind.VAL, 10))
        assert best.iteration == 1
        assert db.records[1].val_score.value < db.records[0].val_score.value
        # iteration 2 was warm-started from iteration 1's artifact regardless
        entries = ws.read_evaluations(layout)
        assert entries[1]["warm_start_digest"] == ws.artifact_digest(layout, db.records[0].artifact)

    def test_data_train_json_carries_incumbent_rollouts(
        self, tmp_path, gateway, mock_endpoint_factory
    ):
        runner, layout = build_runner(
            tmp_path, mock_endpoint_factory, gateway, offline_script(2),
            config=RunConfig(iterations=2),
        )
        runner.run_offline(make_split(SplitKind.TRAIN, 20), make_split(SplitKind.VAL, 10))
        # iteration 1 learned from the skeleton (LEVEL 0): all unknown
        r1 = json.loads((layout.iter_dir(1) / "data" / "train.json").read_text())
        assert r1["summary"]["n_correct"] == 0
        # iteration 2 learned from iteration 1's artifact (LEVEL 1): 5 of 20
        r2 = json.loads((layout.iter_dir(2) / "data" / "train.json").read_text())
        assert r2["summary"]["n_correct"] == 5

    def test_skill_invalid_iteration_recorded_and_loop_continues(
        self, tmp_path, gateway, mock_endpoint_factory
    ):
        rules = [
            # iteration 1: meta writes SKILL.md without the overview heading, twice
            MockRule(
                pattern="Meta-Level Agent",
                response=[{"name": "Write", "arguments": {
                    "file_path": "iter1/.claude/skills/learning-context/SKILL.md",
                    "content": "no overview heading here\n",
                }}],
                once=True,
            ),
            MockRule(pattern="Meta-Level Agent", response="done", once=True),
            MockRule(pattern="Meta-Level Agent", response="still nothing", once=True),
            MockRule(pattern="Meta-Level Agent", response="giving up", once=True),
        ] + offline_script(2)[4:]  # iteration 2 rules proceed normally
        # fix iteration numbering in the reused script (it targets iter2 slots)
        runner, layout = build_runner(
            tmp_path, mock_endpoint_factory, gateway, rules, config=RunConfig(iterations=2)
        )
        best, db = runner.run_offline(make_split(SplitKind.TRAIN, 20), make_split(SplitKind.VAL, 10))
        assert db.records[0].status is RecordStatus.SKILL_INVALID
        assert db.records[1].status is RecordStatus.OK
        assert best.iteration == 2
        entries = ws.read_evaluations(layout)
        assert entries[0]["status"] == "skill-invalid"
        assert entries[0]["train_score"] is None

    def test_artifact_invalid_after_remediation_recorded(
        self, tmp_path, gateway, mock_endpoint_factory
    ):
        rules = [
            MockRule(
                pattern="Meta-Level Agent",
                response=[{"name": "Write", "arguments": {
                    "file_path": "iter1/.claude/skills/learning-context/SKILL.md",
                    "content": "## Skill Overview\nfine\n",
                }}],
                once=True,
            ),
            MockRule(pattern="Meta-Level Agent", response="ok", once=True),
            # base agent destroys the entrypoint and never fixes it
            MockRule(
                pattern="Context Engineer",
                response=[{"name": "Bash", "arguments": {"command": "rm retrieve_context.py"}}],
                once=True,
            ),
            MockRule(pattern="Context Engineer", response="oops", once=True),
            MockRule(pattern="Context Engineer", response="not fixing it", once=True),
        ]
        runner, _ = build_runner(
            tmp_path, mock_endpoint_factory, gateway, rules, config=RunConfig(iterations=1)
        )
        with pytest.raises(RunFailedError):
            runner.run_offline(make_split(SplitKind.TRAIN, 4), make_split(SplitKind.VAL, 2))
        assert runner.db.records[0].status is RecordStatus.ARTIFACT_INVALID

    def test_remediation_session_can_fix_the_artifact(
        self, tmp_path, gateway, mock_endpoint_factory
    ):
        rules = [
            MockRule(
                pattern="Meta-Level Agent",
                response=[{"name": "Write", "arguments": {
                    "file_path": "iter1/.claude/skills/learning-context/SKILL.md",
                    "content": "## Skill Overview\nfine\n",
                }}],
                once=True,
            ),
            MockRule(pattern="Meta-Level Agent", response="ok", once=True),
            MockRule(
                pattern="Context Engineer",
                response=[{"name": "Bash", "arguments": {"command": "rm retrieve_context.py"}}],
                once=True,
            ),
            MockRule(pattern="Context Engineer", response="done (broken)", once=True),
            # remediation prompt carries the validation report; agent restores the file
            MockRule(
                pattern="Validation Report",
                response=[{"name": "Bash", "arguments": {
                    "command": (
                        "printf '#!/usr/bin/env python3\\nimport json,sys\\n"
                        "sys.stdin.read()\\nprint(json.dumps({\"context\": \"restored\"}))\\n'"
                        " > retrieve_context.py && chmod +x retrieve_context.py"
                    ),
                }}],
                once=True,
            ),
            MockRule(pattern="Validation Report", response="fixed", once=True),
            MockRule(pattern="Answer the question", response="unknown"),
        ]
        runner, _ = build_runner(
            tmp_path, mock_endpoint_factory, gateway, rules, config=RunConfig(iterations=1)
        )
        best, db = runner.run_offline(make_split(SplitKind.TRAIN, 4), make_split(SplitKind.VAL, 2))
        assert db.records[0].status is RecordStatus.OK
        assert best.iteration == 1


class TestBatchedRun:
    def test_sub_iteration_dirs_and_lineage(self, tmp_path, gateway, mock_endpoint_factory):
        rules = [
            MockRule(
                pattern="Meta-Level Agent",
                response=[{"name": "Write", "arguments": {
                    "file_path": "iter1_sub0/.claude/skills/learning-context/SKILL.md",
                    "content": "## Skill Overview\nbatch learning\n",
                }}],
                once=True,
            ),
            MockRule(pattern="Meta-Level Agent", response="ok", once=True),
            # one base session per sub-batch
            MockRule(
                pattern="Context Engineer",
                response=[{"name": "Write", "arguments": {
                    "file_path": "context/knowledge.md", "content": "LEVEL 1\nbatch 0\n",
                }}],
                once=True,
            ),
            MockRule(pattern="Context Engineer", response="sub0 done", once=True),
            MockRule(
                pattern="Context Engineer",
                response=[{"name": "Write", "arguments": {
                    "file_path": "context/knowledge.md", "content": "LEVEL 2\nbatch 1\n",
                }}],
                once=True,
            ),
            MockRule(pattern="Context Engineer", response="sub1 done", once=True),
            MockRule(pattern="Answer the question", response=leveled_generator),
        ]
        runner, layout = build_runner(
            tmp_path, mock_endpoint_factory, gateway, rules,
            config=RunConfig(iterations=1, batch_size=10), n_train=20,
        )
        best, db = runner.run_offline(make_split(SplitKind.TRAIN, 20), make_split(SplitKind.VAL, 10))
        assert layout.iter_dir(1, 0).is_dir() and layout.iter_dir(1, 1).is_dir()
        # skill copied from sub0 into sub1
        assert (layout.iter_dir(1, 1) / ws.SKILL_REL_DIR / "SKILL.md").is_file()
        # sub1 warm-started from sub0's artifact
        assert (layout.iter_dir(1, 1) / "data" / "train.json").is_file()
        sub1_feedback = json.loads((layout.iter_dir(1, 1) / "data" / "train.json").read_text())
        assert sub1_feedback["summary"]["n"] == 10
        # final artifact is sub1's (LEVEL 2): train 10/20, val 6/10
        assert best.train_score.value == 0.5
        assert best.val_score.value == 0.6
        entries = ws.read_evaluations(layout)
        assert len(entries) == 1 and entries[0]["sub"] == 2


class TestOnlineRun:
    def _online_rules(self, learn_after: int, sessions: int):
        """Base-agent updates after each instance; the update after
        `learn_after` instances writes the marker the generator needs."""
        rules = []
        for s in range(1, sessions + 1):
            if s == learn_after:
                rules.append(
                    MockRule(
                        pattern="Context Engineer",
                        response=[{"name": "Write", "arguments": {
                            "file_path": "context/learned.md", "content": "TRAINED\n",
                        }}],
                        once=True,
                    )
                )
            rules.append(MockRule(pattern="Context Engineer", response=f"update {s}", once=True))

        def generator(text: str) -> str:
            import re

            if "TRAINED" not in text:
                return "unknown"
            item = re.search(r"item (\d+)", text)
            from conftest import color_of

            return color_of(int(item.group(1))) if item else "unknown"

        rules.append(MockRule(pattern="Answer the question", response=generator))
        return rules

    def test_first_inference_frozen_before_updates(self, tmp_path, gateway, mock_endpoint_factory):
        stream = list(make_split(SplitKind.TEST, 5).instances)
        runner, layout = build_runner(
            tmp_path, mock_endpoint_factory, gateway,
            self._online_rules(learn_after=2, sessions=5),
            config=RunConfig(iterations=1, mode="online", online_variant="no-skill"),
        )
        result, artifact = runner.run_online(stream)
        outcomes = [r.is_correct for r in result.detailed_results]
        assert outcomes == [False, False, True, True, True]
        assert result.summary.score.value == 0.6
        # the final artifact knows the marker, yet early scores stayed frozen
        learned = layout.base / artifact.root_dir / "context" / "learned.md"
        assert learned.read_text() == "TRAINED\n"

    def test_no_skill_variant_renders_without_skill_guidance(
        self, tmp_path, gateway, mock_endpoint_factory
    ):
        stream = list(make_split(SplitKind.TEST, 2).instances)
        runner, layout = build_runner(
            tmp_path, mock_endpoint_factory, gateway,
            self._online_rules(learn_after=1, sessions=2),
            config=RunConfig(iterations=1, mode="online", online_variant="no-skill"),
        )
        runner.run_online(stream)
        transcript = (layout.base / "iter1.base.transcript.jsonl").read_text()
        assert "SKILL.md" not in transcript

    def test_fixed_skill_variant_runs_one_crossover_and_copies_skill(
        self, tmp_path, gateway, mock_endpoint_factory
    ):
        rules = [
            MockRule(
                pattern="Meta-Level Agent",
                response=[{"name": "Write", "arguments": {
                    "file_path": "iter1/.claude/skills/learning-context/SKILL.md",
                    "content": "## Skill Overview\nfixed online skill\n",
                }}],
                once=True,
            ),
            MockRule(pattern="Meta-Level Agent", response="ok", once=True),
        ] + self._online_rules(learn_after=1, sessions=3)
        stream = list(make_split(SplitKind.TEST, 3).instances)
        runner, layout = build_runner(
            tmp_path, mock_endpoint_factory, gateway, rules,
            config=RunConfig(iterations=1, mode="online", online_variant="fixed-skill"),
        )
        result, _ = runner.run_online(stream)
        # the same fixed skill accompanies every online update dir
        for k in (1, 2, 3):
            skill = layout.iter_dir(k) / ws.SKILL_REL_DIR / "SKILL.md"
            assert skill.is_file() and "fixed online skill" in skill.read_text()
        assert [r.is_correct for r in result.detailed_results] == [False, True, True]

    def test_failed_update_keeps_prior_artifact_active(
        self, tmp_path, gateway, mock_endpoint_factory
    ):
        # update 1 succeeds and learns; update 2 deletes the entrypoint (invalid;
        # prior artifact stays active); instance 3 still scores with update 1's artifact
        rules = [
            MockRule(
                pattern="Context Engineer",
                response=[{"name": "Write", "arguments": {
                    "file_path": "context/learned.md", "content": "TRAINED\n",
                }}],
                once=True,
            ),
            MockRule(pattern="Context Engineer", response="update 1", once=True),
            MockRule(
                pattern="Context Engineer",
                response=[{"name": "Bash", "arguments": {"command": "rm retrieve_context.py"}}],
                once=True,
            ),
            MockRule(pattern="Context Engineer", response="broken", once=True),
            MockRule(pattern="Context Engineer", response="still broken", once=True),
            MockRule(pattern="Context Engineer", response="final update", once=True),
        ]

        def generator(text):
            from conftest import color_of
            import re

            if "TRAINED" not in text:
                return "unknown"
            m = re.search(r"item (\d+)", text)
            return color_of(int(m.group(1)))

        rules.append(MockRule(pattern="Answer the question", response=generator))
        stream = list(make_split(SplitKind.TEST, 3).instances)
        runner, _ = build_runner(
            tmp_path, mock_endpoint_factory, gateway, rules,
            config=RunConfig(iterations=1, mode="online", online_variant="no-skill"),
        )
        result, artifact = runner.run_online(stream)
        assert [r.is_correct for r in result.detailed_results] == [False, True, True]
        # the final lineage descends from update 1, skipping the broken update 2:
        # iter3 was warm-started from iter1 and inherited the learned marker
        assert artifact.root_dir == "iter3"
        layout = runner.layout
        assert (layout.base / "iter3" / "context" / "learned.md").read_text() == "TRAINED\n"
        assert not (layout.base / "iter2" / ws.ENTRYPOINT_NAME).exists()


class TestSummarizeDb:
    def _record(self, k, train, val):
        return SkillRecord(
            iteration=k,
            skill_dir=f"meta_agent/skills/iter{k}",
            artifact=ContextArtifact(
                root_dir=f"iter{k}", context_dir=f"iter{k}/context",
                retrieval_entrypoint=f"iter{k}/retrieve_context.py", validated=True,
            ),
            train_score=MetricScore(train, MetricKind.ACCURACY, 10),
            val_score=MetricScore(val, MetricKind.ACCURACY, 5),
            status=RecordStatus.OK,
        )

    def test_empty_db_renders_marker(self):
        assert summarize_db(SkillDatabase()) == EMPTY_HISTORY_MARKER

    def test_overfit_flagged(self):
        db = SkillDatabase()
        rec = self._record(1, train=0.95, val=0.84)
        db.append(rec)
        db.update_best(rec)
        out = summarize_db(db)
        assert "overfitting" in out and "train 0.950" in out

    def test_underfit_flagged(self):
        db = SkillDatabase()
        rec = self._record(1, train=0.40, val=0.41)
        db.append(rec)
        db.update_best(rec)
        assert "underfitting" in summarize_db(db)

    def test_ordered_one_line_per_record(self):
        db = SkillDatabase()
        for k, (t, v) in enumerate([(0.6, 0.55), (0.7, 0.68)], start=1):
            rec = self._record(k, t, v)
            db.append(rec)
            db.update_best(rec)
        lines = summarize_db(db).splitlines()
        assert len(lines) == 2
        assert lines[0].startswith("- iteration 1") and lines[1].startswith("- iteration 2")
        assert "current best" in lines[1]
