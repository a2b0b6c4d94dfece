"""Operator entry points: ingest data, train, evaluate, report, serve the mock.

Exit codes: 0 success, 1 usage or configuration error, 2 run failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import random
import sys
from contextlib import contextmanager
from pathlib import Path

from . import workspace as ws
from .config import CliConfig, ConfigError, load_config, load_task_spec, require_api_key
from .evolution import EvolutionRunner, RunFailedError, VAL_ROLLOUT_DIRNAME
from .gateway import ModelGateway
from .mock_server import MockModelServer, load_script
from .model import DataSplit, RolloutSet, SplitKind
from .retrieval import validate_artifact
from .rollout import rollout

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUN_FAILURE = 2


class IngestError(Exception):
    pass


# dataset ingestion

def _parse_line(task: str, line_no: int, line: str) -> dict:
    try:
        doc = json.loads(line)
    except json.JSONDecodeError:
        raise IngestError(f"line {line_no}: parse failure")
    if task == "aegis2":
        if "prompt" not in doc or "prompt_label" not in doc:
            raise IngestError(f"line {line_no}: missing prompt/prompt_label")
        return {"question": str(doc["prompt"]), "target": str(doc["prompt_label"])}
    if "question" not in doc or "target" not in doc:
        raise IngestError(f"line {line_no}: missing question/target")
    target = doc["target"]
    if isinstance(target, list):
        target = ";".join(str(t) for t in target)
    return {"question": str(doc["question"]), "target": str(target)}


def _read_source(task: str, path: Path) -> list[dict]:
    rows = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if line.strip():
            rows.append(_parse_line(task, n, line))
    return rows


def cmd_ingest(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = ("train", "val", "test")
    if args.sizes:
        rows = _read_source(args.task, Path(args.source))
        if args.shuffle:
            random.Random(args.seed).shuffle(rows)
        sizes = [int(s) for s in args.sizes.split("/")]
        if len(sizes) != 3:
            raise IngestError("--sizes must be train/val/test, e.g. 200/100/100")
        if sum(sizes) > len(rows):
            raise IngestError(f"source has {len(rows)} rows; splits need {sum(sizes)}")
        offset = 0
        chunks = []
        for size in sizes:
            chunks.append(rows[offset : offset + size])
            offset += size
    else:
        sources = {"train": args.train_file, "val": args.val_file, "test": args.test_file}
        missing = [n for n, p in sources.items() if not p]
        if missing:
            raise IngestError(f"either --sizes or explicit split files required (missing {missing})")
        chunks = [_read_source(args.task, Path(sources[n])) for n in names]
    for name, chunk in zip(names, chunks):
        path = out_dir / f"{name}.jsonl"
        with path.open("w", encoding="utf-8") as f:
            for i, row in enumerate(chunk):
                f.write(json.dumps({"id": i, **row}, ensure_ascii=False) + "\n")
        print(f"{name}: {len(chunk)} instances -> {path}")
    return EXIT_OK


def load_split(path: Path, kind: SplitKind) -> DataSplit:
    return DataSplit.from_jsonl(kind, path.read_text(encoding="utf-8"))


# workspace locking

@contextmanager
def workspace_lock(base: Path):
    base.mkdir(parents=True, exist_ok=True)
    lock = base / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"workspace is locked by another command ({lock})")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


@contextmanager
def _maybe_mock(config: CliConfig):
    """When a mock script is configured, serve it and point every endpoint at it.

    The env vars are set too so agent workspace scripts (utils/llm.py) reach
    the same mock; prior values are restored on exit.
    """
    if not config.mock_script:
        yield {
            "agentic": config.agentic.resolve(),
            "generator": config.generator.resolve(),
            "embedding": config.embedding.resolve(),
        }
        return
    saved = {name: os.environ.get(name) for name in ("OPENROUTER_API_BASE", "SANDBOX_MODEL")}
    with MockModelServer(load_script(config.mock_script)) as server:
        try:
            os.environ["OPENROUTER_API_BASE"] = server.base_url
            os.environ.setdefault("SANDBOX_MODEL", config.sandbox_model or "mock-model")
            from dataclasses import replace

            yield {
                "agentic": replace(config.agentic.resolve(), base_url=server.base_url),
                "generator": replace(config.generator.resolve(), base_url=server.base_url),
                "embedding": replace(config.embedding.resolve(), base_url=server.base_url),
            }
        finally:
            for name, value in saved.items():
                if value is None:
                    os.environ.pop(name, None)
                else:
                    os.environ[name] = value


# commands

def cmd_train(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    if args.mode or args.variant:
        from dataclasses import replace

        run = config.run
        if args.mode:
            run = replace(run, mode=args.mode)
        if args.variant:
            run = replace(run, online_variant=args.variant)
        config = replace(config, run=run)
    require_api_key(config)
    spec = load_task_spec(config.task_spec)
    train = load_split(Path(config.data["train"]), SplitKind.TRAIN)
    workspace_base = Path(config.workspace)

    with _maybe_mock(config) as endpoints:
        gateway = ModelGateway(max_concurrency=config.max_concurrency)
        layout = ws.init_workspace(workspace_base, train)
        with workspace_lock(layout.base):
            runner = EvolutionRunner(
                layout=layout,
                spec=spec,
                gateway=gateway,
                agentic_endpoint=endpoints["agentic"],
                generator_endpoint=endpoints["generator"],
                config=config.run,
                limits=config.limits,
            )
            try:
                if config.run.mode == "online":
                    stream_path = Path(config.data["test" if "test" in config.data else "train"])
                    stream = load_split(stream_path, SplitKind.TEST)
                    result, artifact = runner.run_online(list(stream.instances))
                    report = {
                        "mode": "online",
                        "variant": config.run.online_variant,
                        "n": result.summary.n,
                        "score": result.summary.score.to_dict(),
                        "final_artifact": artifact.root_dir,
                        "usage": gateway.ledger.totals(),
                    }
                    print(f"online {spec.metric.value}: {result.summary.score.value:.4f} "
                          f"over {result.summary.n} first inferences")
                else:
                    val = load_split(Path(config.data["val"]), SplitKind.VAL)
                    best, db = runner.run_offline(train, val)
                    rows = []
                    print(f"{'k':>3} {'train':>7} {'val':>7} {'status':>16} {'best':>5}")
                    for rec in db.records:
                        t = f"{rec.train_score.value:.3f}" if rec.train_score else "-"
                        v = f"{rec.val_score.value:.3f}" if rec.val_score else "-"
                        is_best = "*" if db.best is rec else ""
                        print(f"{rec.iteration:>3} {t:>7} {v:>7} {rec.status.value:>16} {is_best:>5}")
                        rows.append(rec.to_dict())
                    report = {
                        "mode": "offline",
                        "best_iteration": best.iteration,
                        "best_val_score": best.val_score.to_dict(),
                        "iterations": rows,
                        "usage": gateway.ledger.totals(),
                    }
                    print(f"best: iteration {best.iteration} "
                          f"({spec.metric.value} {best.val_score.value:.4f} on val)")
            except RunFailedError as exc:
                print(f"run failed: {exc}", file=sys.stderr)
                return EXIT_RUN_FAILURE
            (layout.base / "run_report.json").write_text(
                json.dumps(report, ensure_ascii=False, indent=2), encoding="utf-8"
            )
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    require_api_key(config)
    spec = load_task_spec(config.task_spec)
    split_path = Path(args.split)
    split = load_split(split_path, SplitKind.TEST)
    if not len(split):
        print("empty split", file=sys.stderr)
        return EXIT_USAGE
    artifact_path = Path(args.artifact)
    entrypoint = artifact_path / ws.ENTRYPOINT_NAME if artifact_path.is_dir() else artifact_path

    with _maybe_mock(config) as endpoints:
        report = validate_artifact(
            entrypoint,
            [i.question for i in split.instances[:3]],
            config.limits.retrieval_timeout_s,
        )
        if not report.passed:
            print(report.render(), file=sys.stderr)
            return EXIT_RUN_FAILURE
        gateway = ModelGateway(max_concurrency=config.max_concurrency)
        result = rollout(
            entrypoint,
            spec,
            split,
            gateway,
            endpoints["generator"],
            timeout_s=config.limits.retrieval_timeout_s,
            max_context_chars=config.limits.max_context_chars,
            max_workers=config.limits.rollout_workers,
        )
    out = Path(args.out)
    out.write_text(result.to_json(), encoding="utf-8")
    print(f"{spec.metric.value}: {result.summary.score.value:.4f} "
          f"({result.summary.n_correct}/{result.summary.n} instance-correct) -> {out}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    base = Path(args.workspace)
    layout = ws.WorkspaceLayout(base=base.absolute())
    if not layout.evaluations_file.is_file():
        print(f"no evaluations.json under {base}", file=sys.stderr)
        return EXIT_USAGE
    entries = ws.read_evaluations(layout)
    rollout_instances = 0
    for path in sorted(base.glob("iter*/data/train.json")) + sorted(
        (base / VAL_ROLLOUT_DIRNAME).glob("*.val.json")
    ):
        rollout_instances += RolloutSet.load(path).summary.n

    best_entry = None
    for e in entries:
        if e.get("status") == "ok" and (
            best_entry is None or e["val_score"] > best_entry["val_score"]
        ):
            best_entry = e

    context_chars = 0
    if best_entry and best_entry.get("artifact_path"):
        artifact_dir = base / best_entry["artifact_path"]
        context_dir = artifact_dir / "context"
        if context_dir.is_dir():
            context_chars = sum(p.stat().st_size for p in context_dir.rglob("*") if p.is_file())
        entry_file = artifact_dir / ws.ENTRYPOINT_NAME
        if entry_file.is_file():
            context_chars += entry_file.stat().st_size

    report = {
        "iterations": entries,
        "best_iteration": best_entry["iteration"] if best_entry else None,
        "persisted_rollout_instances": rollout_instances,
        "best_context_token_estimate": context_chars // 4,
        "total_wall_clock_s": round(sum(e.get("wall_clock_s") or 0 for e in entries), 3),
    }
    run_report = base / "run_report.json"
    if run_report.is_file():
        report["usage"] = json.loads(run_report.read_text(encoding="utf-8")).get("usage", {})

    text = json.dumps(report, ensure_ascii=False, indent=2)
    if args.json:
        Path(args.json).write_text(text, encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_validate_artifact(args: argparse.Namespace) -> int:
    artifact_path = Path(args.artifact)
    entrypoint = artifact_path / ws.ENTRYPOINT_NAME if artifact_path.is_dir() else artifact_path
    probes = args.probe or ["What is this task about?"]
    report = validate_artifact(entrypoint, probes, args.timeout)
    print(report.render())
    return EXIT_OK if report.passed else EXIT_RUN_FAILURE


def cmd_mock_serve(args: argparse.Namespace) -> int:
    server = MockModelServer(load_script(args.script), port=args.port)
    server.start()
    print(server.base_url, flush=True)
    try:
        server._thread.join()
    except KeyboardInterrupt:
        server.stop()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skillforge")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="convert a source JSONL into canonical split files")
    p.add_argument("--source", help="single source JSONL (used with --sizes)")
    p.add_argument("--task", required=True, help="task name (aegis2 maps prompt/prompt_label)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--sizes", help="train/val/test sizes, e.g. 200/100/100")
    p.add_argument("--train-file")
    p.add_argument("--val-file")
    p.add_argument("--test-file")
    p.add_argument("--shuffle", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("train", help="run the offline or online optimization loop")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", choices=["offline", "online"], help="override the config's mode")
    p.add_argument("--variant", choices=["fixed-skill", "no-skill"],
                   help="override the config's online variant")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score an artifact on a split")
    p.add_argument("--config", required=True)
    p.add_argument("--artifact", required=True, help="iteration dir or entrypoint path")
    p.add_argument("--split", required=True, help="split JSONL path")
    p.add_argument("--out", default="eval_result.json")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("report", help="summarize a finished workspace")
    p.add_argument("--workspace", required=True)
    p.add_argument("--json", help="also write the report document here")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("validate-artifact", help="probe an artifact's retrieval interface")
    p.add_argument("--artifact", required=True)
    p.add_argument("--probe", action="append", help="probe question (repeatable)")
    p.add_argument("--timeout", type=int, default=30)
    p.set_defaults(fn=cmd_validate_artifact)

    p = sub.add_parser("mock-serve", help="serve a scripted mock endpoint")
    p.add_argument("--script", required=True)
    p.add_argument("--port", type=int, default=0)
    p.set_defaults(fn=cmd_mock_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.fn(args)
    except (ConfigError, IngestError, ws.WorkspaceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
