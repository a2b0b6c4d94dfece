"""Rollout engine: template filling, fault degradation, determinism, persistence."""

import stat

import pytest

from skillforge.mock_server import MockConfig, MockRule
from skillforge.model import RolloutSet, SplitKind
from skillforge.rollout import recompute_summary, rollout

from conftest import leveled_generator, make_split, toy_spec


def skeleton_entrypoint(tmp_path, context_text: str | None = None):
    workdir = tmp_path / "artifact"
    (workdir / "context").mkdir(parents=True)
    if context_text is not None:
        (workdir / "context" / "k.md").write_text(context_text)
    entry = workdir / "retrieve_context.py"
    entry.write_text(
        "#!/usr/bin/env python3\n"
        "import json, sys\nfrom pathlib import Path\n"
        "here = Path(__file__).resolve().parent / 'context'\n"
        "parts = [p.read_text() for p in sorted(here.rglob('*')) if p.is_file()]\n"
        "json.loads(sys.stdin.read())\n"
        "print(json.dumps({'context': '\\n'.join(parts)}))\n"
    )
    entry.chmod(entry.stat().st_mode | stat.S_IXUSR)
    return entry


@pytest.fixture
def generator(mock_endpoint_factory):
    return mock_endpoint_factory(
        MockConfig(rules=[MockRule(pattern="Answer the question", response=leveled_generator)])
    )


class TestRollout:
    def test_perfect_mock_scores_full(self, tmp_path, gateway, mock_endpoint_factory):
        entry = skeleton_entrypoint(tmp_path)
        split = make_split(SplitKind.TRAIN, 3)
        targets = {i.id: i.target for i in split.instances}

        def perfect(text: str) -> str:
            import re

            qid = int(re.search(r"item (\d+)", text).group(1))
            return targets[qid]

        _, endpoint = mock_endpoint_factory(
            MockConfig(rules=[MockRule(pattern="Answer the question", response=perfect)])
        )
        result = rollout(entry, toy_spec(), split, gateway, endpoint)
        assert result.summary.n == 3 and result.summary.n_correct == 3
        assert result.summary.score.value == 1.0

    def test_leveled_generator_scores_by_context_level(self, tmp_path, gateway, generator):
        _, endpoint = generator
        split = make_split(SplitKind.TRAIN, 20)
        entry = skeleton_entrypoint(tmp_path, context_text="LEVEL 2\n")
        result = rollout(entry, toy_spec(), split, gateway, endpoint)
        # items with id % 4 < 2 answer correctly: 10 of 20
        assert result.summary.n_correct == 10
        assert result.summary.score.value == 0.5

    def test_failing_retrieval_degrades_to_empty_context(
        self, tmp_path, gateway, mock_endpoint_factory
    ):
        entry = tmp_path / "broken.py"
        entry.write_text("#!/usr/bin/env python3\nimport sys\nsys.exit(1)\n")
        entry.chmod(0o755)

        def echo_context_presence(text: str) -> str:
            marker = "Context:\n\nQuestion"  # empty context slot
            return "empty-context" if marker in text else "had-context"

        _, endpoint = mock_endpoint_factory(
            MockConfig(
                rules=[MockRule(pattern="Answer the question", response=echo_context_presence)]
            )
        )
        split = make_split(SplitKind.TRAIN, 3)
        result = rollout(entry, toy_spec(), split, gateway, endpoint)
        assert result.summary.n == 3
        assert all(r.llm_answer == "empty-context" for r in result.detailed_results)

    def test_generator_failure_recorded_not_raised(self, tmp_path, gateway, mock_endpoint_factory):
        entry = skeleton_entrypoint(tmp_path)
        _, endpoint = mock_endpoint_factory(
            MockConfig(
                rules=[
                    MockRule(pattern="item 0", response="x", fail_times=99),
                    MockRule(pattern="Answer the question", response="unknown"),
                ]
            )
        )
        split = make_split(SplitKind.TRAIN, 2)
        result = rollout(entry, toy_spec(), split, gateway, endpoint)
        assert result.detailed_results[0].parse_error == "model failure"
        assert not result.detailed_results[0].is_correct
        assert result.detailed_results[1].parse_error is None

    def test_order_preserved_and_deterministic(self, tmp_path, gateway, generator):
        _, endpoint = generator
        entry = skeleton_entrypoint(tmp_path, context_text="LEVEL 3\n")
        split = make_split(SplitKind.TRAIN, 12)
        first = rollout(entry, toy_spec(), split, gateway, endpoint, max_workers=8)
        second = rollout(entry, toy_spec(), split, gateway, endpoint, max_workers=3)
        assert [r.id for r in first.detailed_results] == [i.id for i in split.instances]
        assert first == second

    def test_persisted_set_reloads_equal(self, tmp_path, gateway, generator):
        _, endpoint = generator
        entry = skeleton_entrypoint(tmp_path, context_text="LEVEL 1\n")
        split = make_split(SplitKind.TRAIN, 4)
        out = tmp_path / "data" / "train.json"
        result = rollout(entry, toy_spec(), split, gateway, endpoint, persist_path=out)
        assert RolloutSet.load(out) == result

    def test_summary_recomputable_from_details(self, tmp_path, gateway, generator):
        _, endpoint = generator
        entry = skeleton_entrypoint(tmp_path, context_text="LEVEL 2\n")
        split = make_split(SplitKind.TRAIN, 8)
        result = rollout(entry, toy_spec(), split, gateway, endpoint)
        assert recompute_summary(toy_spec(), result) == result.summary

    def test_empty_split_rejected(self, tmp_path, gateway, generator):
        _, endpoint = generator
        entry = skeleton_entrypoint(tmp_path)
        with pytest.raises(ValueError, match="empty"):
            rollout(entry, toy_spec(), make_split(SplitKind.TRAIN, 0), gateway, endpoint)
