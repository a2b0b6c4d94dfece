"""The outer optimization loop: evolve a skill, execute it, evaluate, keep the best.

Each iteration k:
  1. prepare iterK warm-started from the incumbent best artifact
  2. meta-agent session writes a new skill (crossover over the full history)
  3. the incumbent's training rollouts land in iterK/data/train.json
  4. base-agent session executes the skill and updates the artifact
  5. the new artifact is scored on train and val; the database records the
     attempt; the best artifact is retained (incumbent wins ties)

History-informed (1+1) selection: one incumbent, one offspring, argmax by
validation score. Failed iterations keep their iteration number and land in
the database with a status marker so later crossovers can learn from them.

Training rollouts of an unchanged incumbent are reused rather than re-run:
at temperature 0 a byte-identical artifact yields byte-identical rollouts,
so the reuse is exact. Rollouts are never reused across different artifacts.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

from . import workspace as ws
from .gateway import ModelEndpoint, ModelGateway
from .harness import AgentSession, run_session
from .model import (
    ContextArtifact,
    DataInstance,
    DataSplit,
    RecordStatus,
    RolloutRecord,
    RolloutSet,
    SkillDatabase,
    SkillRecord,
    SplitKind,
    TaskSpecification,
)
from .prompts import BASE_PROMPT, BASE_PROMPT_NO_SKILL, META_PROMPT, load_asset, render_prompt
from .retrieval import RetrievalProtocol, ValidationReport, validate_artifact
from .rollout import rollout, run_instance, summarize

logger = logging.getLogger(__name__)

EMPTY_HISTORY_MARKER = (
    "No previous iterations: the skill database is empty. "
    "Design the first-generation skill from the task specification alone."
)

VAL_ROLLOUT_DIRNAME = "rollouts"


class RunFailedError(Exception):
    pass


class SkillInvalidError(Exception):
    pass


class ArtifactInvalidError(Exception):
    def __init__(self, report: ValidationReport):
        super().__init__(report.render())
        self.report = report


@dataclass(frozen=True)
class RunConfig:
    iterations: int = 5
    mode: str = "offline"  # offline | online
    batch_size: int | None = None
    online_variant: str = "fixed-skill"  # fixed-skill | no-skill
    online_stride: int = 1
    seed: int = 0
    overfit_gap: float = 0.05
    underfit_floor: float = 0.5

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ValueError("need at least one iteration")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive when set")
        if self.mode not in ("offline", "online"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.online_variant not in ("fixed-skill", "no-skill"):
            raise ValueError(f"unknown online variant {self.online_variant!r}")


@dataclass(frozen=True)
class Limits:
    max_turns: int = 80
    max_tool_calls: int = 200
    bash_timeout_s: int = 300
    retrieval_timeout_s: int = 30
    max_context_chars: int = 400_000
    rollout_workers: int = 16


def summarize_db(
    db: SkillDatabase,
    base: Path | None = None,
    overfit_gap: float = 0.05,
    underfit_floor: float = 0.5,
) -> str:
    """Render the history digest bound into the meta prompt's skill-database slot."""
    if not db.records:
        return EMPTY_HISTORY_MARKER
    lines = []
    for rec in db.records:
        marker = " <- current best" if db.best is rec else ""
        if rec.status is not RecordStatus.OK:
            lines.append(f"- iteration {rec.iteration} [{rec.status.value}]: no scores recorded")
            continue
        train, val = rec.train_score.value, rec.val_score.value
        flags = []
        if train - val > overfit_gap:
            flags.append(f"overfitting: train exceeds val by {train - val:.2f}")
        if train < underfit_floor and val < underfit_floor:
            flags.append("underfitting: both scores low")
        flag_text = f" ({'; '.join(flags)})" if flags else ""
        overview = _skill_overview_excerpt(base / rec.skill_dir) if base else ""
        overview_text = f" — overview: {overview}" if overview else ""
        lines.append(
            f"- iteration {rec.iteration} [ok]: train {train:.3f}, val {val:.3f}{flag_text}"
            f" — skill: {rec.skill_dir}{overview_text}{marker}"
        )
    return "\n".join(lines)


def _skill_overview_excerpt(skill_dir: Path) -> str:
    skill_file = skill_dir / ws.SKILL_FILENAME
    if not skill_file.is_file():
        return ""
    seen_heading = False
    for line in skill_file.read_text(encoding="utf-8").splitlines():
        if seen_heading and line.strip():
            return line.strip()[:160]
        if line.strip().startswith(ws.SKILL_OVERVIEW_HEADING):
            seen_heading = True
    return ""


class EvolutionRunner:
    """Wires workspace, gateway, and agent sessions into the optimization loop."""

    def __init__(
        self,
        layout: ws.WorkspaceLayout,
        spec: TaskSpecification,
        gateway: ModelGateway,
        agentic_endpoint: ModelEndpoint,
        generator_endpoint: ModelEndpoint,
        config: RunConfig,
        limits: Limits = Limits(),
        utils_payload: Path | None = None,
    ):
        self.layout = layout
        self.spec = spec
        self.gateway = gateway
        self.agentic = agentic_endpoint
        self.generator = generator_endpoint
        self.config = config
        self.limits = limits
        self.utils_payload = utils_payload
        self.db = SkillDatabase()
        self._best_train_set: RolloutSet | None = None

    # session plumbing

    def _transcript_path(self, iter_name: str, role: str, retry: bool = False) -> Path:
        suffix = ".retry" if retry else ""
        return self.layout.base / f"{iter_name}.{role}{suffix}.transcript.jsonl"

    def _session(self, role: str, prompt: str, iter_dir: Path) -> AgentSession:
        return AgentSession(
            role=role,
            system_prompt=prompt,
            scope=ws.scope_for(role, self.layout, iter_dir),
            max_turns=self.limits.max_turns,
            max_tool_calls=self.limits.max_tool_calls,
            bash_timeout_s=self.limits.bash_timeout_s,
        )

    def _probes(self, split: DataSplit) -> list[str]:
        return [i.question for i in split.instances[:3]]

    # meta level

    def crossover(self, k: int, iter_dir: Path) -> Path:
        """Run the meta-agent to evolve a skill; archive it on success.

        Raises SkillInvalidError when a valid SKILL.md is still missing after
        one remediation session.
        """
        iter_name = iter_dir.name
        bindings = {
            "task_specification": self.spec.description,
            "workspace_base": str(self.layout.base),
            "iter_name": iter_name,
            "skill_database": summarize_db(
                self.db, self.layout.base, self.config.overfit_gap, self.config.underfit_floor
            ),
            "current_iteration": k,
        }
        prompt = render_prompt(load_asset(META_PROMPT), bindings)
        skill_dir = iter_dir / ws.SKILL_REL_DIR
        for attempt, retry in ((1, False), (2, True)):
            session = self._session("meta", prompt, iter_dir)
            run_session(
                self.gateway,
                self.agentic,
                session,
                base_dir=self.layout.base,
                transcript_path=self._transcript_path(iter_name, "meta", retry=retry),
            )
            try:
                ws.validate_skill_dir(skill_dir)
                return ws.archive_skill(self.layout, k, skill_dir)
            except ws.SkillInvalidError as exc:
                logger.warning("iteration %d skill attempt %d invalid: %s", k, attempt, exc)
                prompt = (
                    prompt
                    + "\n\n## Previous Attempt Validation Report\n\n"
                    + f"{exc}\n\nFix the issue and produce the required SKILL.md."
                )
        raise SkillInvalidError(f"no valid skill after remediation (iteration {k})")

    # base level

    def engineer(self, iter_dir: Path, probes: list[str], with_skill: bool = True) -> ContextArtifact:
        """Run the base-agent to update the artifact; validate before accepting.

        Raises ArtifactInvalidError when validation still fails after one
        remediation session.
        """
        asset = BASE_PROMPT if with_skill else BASE_PROMPT_NO_SKILL
        bindings = {
            "task_specification": self.spec.description,
            "iter_dir": str(iter_dir),
            "iter_dir.name": iter_dir.name,
        }
        prompt = render_prompt(load_asset(asset), bindings)
        entrypoint = iter_dir / ws.ENTRYPOINT_NAME
        report: ValidationReport | None = None
        for retry in (False, True):
            session = self._session("base", prompt, iter_dir)
            run_session(
                self.gateway,
                self.agentic,
                session,
                base_dir=iter_dir,
                transcript_path=self._transcript_path(iter_dir.name, "base", retry=retry),
            )
            report = validate_artifact(entrypoint, probes, self.limits.retrieval_timeout_s)
            if report.passed:
                return replace(ws.make_artifact(self.layout, iter_dir), validated=True)
            logger.warning("artifact validation failed in %s:\n%s", iter_dir.name, report.render())
            prompt = (
                prompt
                + "\n\n## Previous Attempt Validation Report\n\n"
                + report.render()
                + "\n\nFix the retrieval interface so every probe passes, then finish."
            )
        raise ArtifactInvalidError(report)

    # rollouts

    def _rollout(
        self, artifact: ContextArtifact, split: DataSplit, persist_path: Path | None = None
    ) -> RolloutSet:
        _, _, entrypoint = artifact.resolve(self.layout.base)
        return rollout(
            entrypoint,
            self.spec,
            split,
            self.gateway,
            self.generator,
            timeout_s=self.limits.retrieval_timeout_s,
            max_context_chars=self.limits.max_context_chars,
            persist_path=persist_path,
            max_workers=self.limits.rollout_workers,
        )

    def _training_feedback(self, warm_artifact: ContextArtifact, split: DataSplit, path: Path) -> RolloutSet:
        """iterK/data/train.json: the incumbent's rollouts, reused when already computed."""
        if self._best_train_set is not None:
            self._best_train_set.save(path)
            return self._best_train_set
        return self._rollout(warm_artifact, split, persist_path=path)

    # offline mode

    def run_offline(self, train: DataSplit, val: DataSplit) -> tuple[SkillRecord, SkillDatabase]:
        if self.config.batch_size is not None:
            return self._run_offline_batched(train, val)
        probes = self._probes(train)
        for k in range(1, self.config.iterations + 1):
            started = time.monotonic()
            prior = self.db.best.artifact if self.db.best else None
            iter_dir = ws.prepare_iteration(
                self.layout, k, prior_best=prior, utils_payload=self.utils_payload
            )
            warm = ws.make_artifact(self.layout, iter_dir, validated=True)
            warm_digest = ws.artifact_digest(self.layout, warm)

            try:
                skill_path = self.crossover(k, iter_dir)
            except SkillInvalidError:
                self._record_failure(k, None, RecordStatus.SKILL_INVALID, started, warm_digest)
                continue

            self._training_feedback(warm, train, iter_dir / "data" / "train.json")

            try:
                artifact = self.engineer(iter_dir, probes)
            except ArtifactInvalidError:
                self._record_failure(
                    k, skill_path, RecordStatus.ARTIFACT_INVALID, started, warm_digest
                )
                continue

            train_set = self._rollout(artifact, train)
            val_set = self._rollout(
                artifact,
                val,
                persist_path=self.layout.base / VAL_ROLLOUT_DIRNAME / f"{iter_dir.name}.val.json",
            )
            record = SkillRecord(
                iteration=k,
                skill_dir=self.layout.relative(skill_path),
                artifact=artifact,
                train_score=train_set.summary.score,
                val_score=val_set.summary.score,
                status=RecordStatus.OK,
            )
            self.db.append(record)
            if self.db.update_best(record):
                self._best_train_set = train_set
            self._append_entry(record, sub=None, started=started, warm_digest=warm_digest)
            logger.info(
                "iteration %d: train %.3f val %.3f (best: iteration %d)",
                k,
                train_set.summary.score.value,
                val_set.summary.score.value,
                self.db.best.iteration,
            )
        if self.db.best is None:
            raise RunFailedError("every iteration failed; no artifact was ever validated")
        return self.db.best, self.db

    def _run_offline_batched(self, train: DataSplit, val: DataSplit) -> tuple[SkillRecord, SkillDatabase]:
        size = self.config.batch_size
        batches = [
            DataSplit(kind=SplitKind.TRAIN, instances=train.instances[i : i + size])
            for i in range(0, len(train.instances), size)
        ]
        probes = self._probes(train)
        for k in range(1, self.config.iterations + 1):
            started = time.monotonic()
            prior = self.db.best.artifact if self.db.best else None
            sub0 = ws.prepare_iteration(
                self.layout, k, sub=0, prior_best=prior, utils_payload=self.utils_payload
            )
            warm_digest = ws.artifact_digest(
                self.layout, ws.make_artifact(self.layout, sub0, validated=True)
            )
            try:
                skill_path = self.crossover(k, sub0)
            except SkillInvalidError:
                self._record_failure(k, None, RecordStatus.SKILL_INVALID, started, warm_digest, sub=0)
                continue

            artifact: ContextArtifact | None = None
            failed = False
            for s, batch in enumerate(batches):
                if s == 0:
                    sub_dir = sub0
                else:
                    sub_dir = ws.prepare_iteration(
                        self.layout,
                        k,
                        sub=s,
                        prior_best=artifact,
                        skill_dir=sub0 / ws.SKILL_REL_DIR,
                        utils_payload=self.utils_payload,
                    )
                warm = ws.make_artifact(self.layout, sub_dir, validated=True)
                self._rollout(warm, batch, persist_path=sub_dir / "data" / "train.json")
                try:
                    artifact = self.engineer(sub_dir, probes)
                except ArtifactInvalidError:
                    self._record_failure(
                        k, skill_path, RecordStatus.ARTIFACT_INVALID, started, warm_digest, sub=s
                    )
                    failed = True
                    break
            if failed:
                continue

            train_set = self._rollout(artifact, train)
            val_set = self._rollout(
                artifact,
                val,
                persist_path=self.layout.base / VAL_ROLLOUT_DIRNAME / f"iter{k}.val.json",
            )
            record = SkillRecord(
                iteration=k,
                skill_dir=self.layout.relative(skill_path),
                artifact=artifact,
                train_score=train_set.summary.score,
                val_score=val_set.summary.score,
                status=RecordStatus.OK,
            )
            self.db.append(record)
            self.db.update_best(record)
            self._append_entry(record, sub=len(batches), started=started, warm_digest=warm_digest)
        if self.db.best is None:
            raise RunFailedError("every iteration failed; no artifact was ever validated")
        return self.db.best, self.db

    # online mode

    def run_online(self, stream: list[DataInstance]) -> tuple[RolloutSet, ContextArtifact]:
        """Sequential first-inference scoring with continual artifact updates.

        Every instance is scored exactly once, with whatever artifact is
        current when it arrives; those frozen results are the reported
        numbers. After each stride of instances the base-agent folds the
        accumulated results into an updated artifact.
        """
        iter_dir = ws.prepare_iteration(self.layout, 1, utils_payload=self.utils_payload)
        with_skill = self.config.online_variant == "fixed-skill"
        if with_skill:
            try:
                self.crossover(1, iter_dir)
            except SkillInvalidError:
                logger.warning("fixed-skill crossover failed; continuing without a skill")
                with_skill = False
        skill_src = iter_dir / ws.SKILL_REL_DIR if with_skill else None

        current = ws.make_artifact(self.layout, iter_dir, validated=True)
        current_dir = iter_dir
        frozen: list[RolloutRecord] = []
        next_k = 1
        probes = [inst.question for inst in stream[:3]]
        for i, instance in enumerate(stream):
            _, _, entrypoint = current.resolve(self.layout.base)
            protocol = RetrievalProtocol(
                entrypoint=entrypoint,
                timeout_s=self.limits.retrieval_timeout_s,
                max_context_chars=self.limits.max_context_chars,
            )
            frozen.append(run_instance(protocol, self.spec, instance, self.gateway, self.generator))

            if (i + 1) % self.config.online_stride != 0 and i != len(stream) - 1:
                continue
            if next_k > 1:
                current_dir = ws.prepare_iteration(
                    self.layout,
                    next_k,
                    prior_best=current,
                    skill_dir=skill_src,
                    utils_payload=self.utils_payload,
                )
            store = RolloutSet(
                summary=summarize(self.spec, frozen), detailed_results=tuple(frozen)
            )
            store.save(current_dir / "data" / "train.json")
            try:
                current = self.engineer(current_dir, probes, with_skill=with_skill)
            except ArtifactInvalidError:
                logger.warning(
                    "online update %d failed validation; keeping the prior artifact", next_k
                )
            next_k += 1

        result = RolloutSet(summary=summarize(self.spec, frozen), detailed_results=tuple(frozen))
        return result, current

    # bookkeeping

    def _record_failure(
        self,
        k: int,
        skill_path: Path | None,
        status: RecordStatus,
        started: float,
        warm_digest: str,
        sub: int | None = None,
    ) -> None:
        record = SkillRecord(
            iteration=k,
            skill_dir=self.layout.relative(skill_path) if skill_path else "",
            artifact=None,
            train_score=None,
            val_score=None,
            status=status,
        )
        self.db.append(record)
        self._append_entry(record, sub=sub, started=started, warm_digest=warm_digest)
        logger.warning("iteration %d recorded as %s", k, status.value)

    def _append_entry(
        self, record: SkillRecord, sub: int | None, started: float, warm_digest: str
    ) -> None:
        ws.append_evaluation(
            self.layout,
            {
                "iteration": record.iteration,
                "sub": sub,
                "train_score": record.train_score.value if record.train_score else None,
                "val_score": record.val_score.value if record.val_score else None,
                "status": record.status.value,
                "skill_path": record.skill_dir or None,
                "artifact_path": record.artifact.root_dir if record.artifact else None,
                "wall_clock_s": round(time.monotonic() - started, 3),
                "warm_start_digest": warm_digest,
            },
        )
