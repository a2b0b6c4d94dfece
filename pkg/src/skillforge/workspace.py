"""On-disk run layout and permission scoping.

One workspace per run:

    base/
      meta_agent/
        train.jsonl          full training dataset
        evaluations.json     one entry per completed iteration
        skills/iterK/        archived skill folders
      iterK/ (or iterK_subN/)
        .claude/skills/learning-context/SKILL.md
        context/             static context files
        retrieve_context.py  executable retrieval entrypoint
        data/train.json      rollouts the base agent learns from
        utils/               vendored helper library for agent scripts

This module is the single point that resolves workspace-relative paths and
the single enforcement point for read/write scoping. Symlinks are resolved
before containment checks and denied when they escape.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .model import ContextArtifact, DataSplit

logger = logging.getLogger(__name__)

ENTRYPOINT_NAME = "retrieve_context.py"
SKILL_REL_DIR = Path(".claude/skills/learning-context")
SKILL_FILENAME = "SKILL.md"
SKILL_OVERVIEW_HEADING = "## Skill Overview"


class WorkspaceError(Exception):
    pass


class SkillInvalidError(WorkspaceError):
    pass


@dataclass(frozen=True)
class PermissionScope:
    """Path-prefix permissions for one agent session."""

    readable: tuple[Path, ...]
    writable: tuple[Path, ...]
    executable_allowed: bool = True

    def __post_init__(self) -> None:
        for w in self.writable:
            if not any(_is_within(w, r) for r in self.readable):
                raise ValueError(f"writable prefix {w} not within any readable prefix")

    def allows_read(self, path: str | os.PathLike) -> bool:
        resolved = _resolve(path)
        return any(_is_within(resolved, prefix) for prefix in self.readable)

    def allows_write(self, path: str | os.PathLike) -> bool:
        resolved = _resolve(path)
        return any(_is_within(resolved, prefix) for prefix in self.writable)


def _resolve(path: str | os.PathLike) -> Path:
    """Resolve symlinks and `..` without requiring the leaf to exist."""
    return Path(os.path.realpath(os.fspath(path)))


def _is_within(path: Path, prefix: Path) -> bool:
    try:
        path.relative_to(_resolve(prefix))
        return True
    except ValueError:
        return False


@dataclass(frozen=True)
class WorkspaceLayout:
    base: Path

    @property
    def meta_dir(self) -> Path:
        return self.base / "meta_agent"

    @property
    def train_file(self) -> Path:
        return self.meta_dir / "train.jsonl"

    @property
    def evaluations_file(self) -> Path:
        return self.meta_dir / "evaluations.json"

    @property
    def skills_dir(self) -> Path:
        return self.meta_dir / "skills"

    def iter_name(self, k: int, sub: int | None = None) -> str:
        return f"iter{k}" if sub is None else f"iter{k}_sub{sub}"

    def iter_dir(self, k: int, sub: int | None = None) -> Path:
        return self.base / self.iter_name(k, sub)

    def iter_dirs(self) -> list[Path]:
        """Existing iteration directories, sorted by (k, sub)."""
        found = []
        for p in self.base.iterdir():
            if p.is_dir() and p.name.startswith("iter"):
                found.append(p)
        return sorted(found, key=lambda p: _iter_sort_key(p.name))

    def relative(self, path: Path) -> str:
        return os.path.relpath(path, self.base)


def _iter_sort_key(name: str) -> tuple[int, int]:
    body = name[len("iter"):]
    if "_sub" in body:
        k, sub = body.split("_sub", 1)
        return (int(k), int(sub))
    return (int(body), -1)


def init_workspace(base: str | os.PathLike, train_split: DataSplit) -> WorkspaceLayout:
    """Create a fresh workspace; refuses a non-empty base to protect prior runs."""
    base_path = Path(base).absolute()
    if base_path.exists() and any(base_path.iterdir()):
        raise WorkspaceError(f"workspace not empty: {base_path}")
    layout = WorkspaceLayout(base=base_path)
    layout.skills_dir.mkdir(parents=True)
    layout.train_file.write_text(
        "".join(
            json.dumps({"question": i.question, "target": i.target}, ensure_ascii=False) + "\n"
            for i in train_split.instances
        ),
        encoding="utf-8",
    )
    layout.evaluations_file.write_text("[]", encoding="utf-8")
    logger.info("initialized workspace at %s (%d training lines)", base_path, len(train_split))
    return layout


def _default_utils_payload():
    return resources.files("skillforge.assets").joinpath("utils")


def prepare_iteration(
    layout: WorkspaceLayout,
    k: int,
    sub: int | None = None,
    prior_best: ContextArtifact | None = None,
    skill_dir: Path | None = None,
    utils_payload: Path | None = None,
) -> Path:
    """Create and populate an iteration directory.

    Warm-starts context/ and the retrieval entrypoint from `prior_best` when
    given, otherwise installs the empty skeleton. The skill folder, when
    provided, lands under .claude/skills/learning-context/.
    """
    if k < 1:
        raise ValueError("iteration numbering starts at 1")
    iter_dir = layout.iter_dir(k, sub)
    if iter_dir.exists():
        raise WorkspaceError(f"iteration directory already exists: {iter_dir}")
    iter_dir.mkdir(parents=True)
    (iter_dir / "data").mkdir()
    (iter_dir / ".claude" / "skills").mkdir(parents=True)

    if prior_best is not None:
        _, prior_context, prior_entry = prior_best.resolve(layout.base)
        shutil.copytree(prior_context, iter_dir / "context")
        shutil.copy2(prior_entry, iter_dir / ENTRYPOINT_NAME)
    else:
        (iter_dir / "context").mkdir()
        skeleton = resources.files("skillforge.assets").joinpath(ENTRYPOINT_NAME).read_text()
        entry = iter_dir / ENTRYPOINT_NAME
        entry.write_text(skeleton, encoding="utf-8")
    (iter_dir / ENTRYPOINT_NAME).chmod(0o755)

    payload = utils_payload if utils_payload is not None else _default_utils_payload()
    utils_dst = iter_dir / "utils"
    utils_dst.mkdir()
    for item in payload.iterdir():
        name = getattr(item, "name", os.path.basename(str(item)))
        if name.endswith(".py"):
            (utils_dst / name).write_text(item.read_text(encoding="utf-8"), encoding="utf-8")

    if skill_dir is not None:
        shutil.copytree(skill_dir, iter_dir / SKILL_REL_DIR)

    return iter_dir


def make_artifact(layout: WorkspaceLayout, iter_dir: Path, validated: bool = False) -> ContextArtifact:
    """Describe the artifact housed in an iteration directory, paths workspace-relative."""
    return ContextArtifact(
        root_dir=layout.relative(iter_dir),
        context_dir=layout.relative(iter_dir / "context"),
        retrieval_entrypoint=layout.relative(iter_dir / ENTRYPOINT_NAME),
        validated=validated,
    )


def scope_for(agent: str, layout: WorkspaceLayout, iter_dir: Path) -> PermissionScope:
    """Permission scope per role.

    meta: read the history (meta_agent/ plus every iteration dir), write only
    the current iteration's .claude/skills/. base: confined to the current
    iteration dir. Session transcripts live beside iteration dirs and are in
    neither scope.
    """
    iter_dir = iter_dir.absolute()
    if not _is_within(_resolve(iter_dir), layout.base):
        raise WorkspaceError(f"iteration dir {iter_dir} outside workspace {layout.base}")
    if agent == "meta":
        readable = tuple([layout.meta_dir] + layout.iter_dirs())
        return PermissionScope(readable=readable, writable=(iter_dir / ".claude" / "skills",))
    if agent == "base":
        return PermissionScope(readable=(iter_dir,), writable=(iter_dir,))
    raise ValueError(f"unknown agent role {agent!r}")


def validate_skill_dir(skill_dir: Path) -> None:
    """A skill folder must hold a SKILL.md with the overview heading."""
    skill_file = skill_dir / SKILL_FILENAME
    if not skill_file.is_file():
        raise SkillInvalidError(f"{SKILL_FILENAME} missing in {skill_dir}")
    if SKILL_OVERVIEW_HEADING not in skill_file.read_text(encoding="utf-8"):
        raise SkillInvalidError(f"{skill_file} lacks a {SKILL_OVERVIEW_HEADING!r} section")


def archive_skill(layout: WorkspaceLayout, k: int, skill_src: Path) -> Path:
    """Copy a completed iteration's skill folder into meta_agent/skills/iterK."""
    validate_skill_dir(skill_src)
    dst = layout.skills_dir / f"iter{k}"
    if dst.exists():
        shutil.rmtree(dst)
    shutil.copytree(skill_src, dst, ignore=shutil.ignore_patterns(".tmp", "__pycache__"))
    return dst


def append_evaluation(layout: WorkspaceLayout, entry: dict) -> None:
    entries = json.loads(layout.evaluations_file.read_text(encoding="utf-8"))
    entries.append(entry)
    layout.evaluations_file.write_text(
        json.dumps(entries, ensure_ascii=False, indent=2), encoding="utf-8"
    )


def read_evaluations(layout: WorkspaceLayout) -> list[dict]:
    return json.loads(layout.evaluations_file.read_text(encoding="utf-8"))


def tree_digest(root: Path, exclude: tuple[str, ...] = ("__pycache__",)) -> str:
    """Stable content hash over a directory tree (paths + bytes)."""
    h = hashlib.sha256()
    if not root.exists():
        return h.hexdigest()
    for path in sorted(root.rglob("*")):
        if any(part in exclude for part in path.parts):
            continue
        rel = path.relative_to(root).as_posix()
        h.update(rel.encode("utf-8"))
        h.update(b"\x00")
        if path.is_file():
            h.update(path.read_bytes())
        h.update(b"\x01")
    return h.hexdigest()


def artifact_digest(layout: WorkspaceLayout, artifact: ContextArtifact) -> str:
    """Hash of an artifact's learned content: context tree plus entrypoint bytes."""
    _, context_dir, entrypoint = artifact.resolve(layout.base)
    h = hashlib.sha256()
    h.update(tree_digest(context_dir).encode())
    if entrypoint.is_file():
        h.update(entrypoint.read_bytes())
    return h.hexdigest()
