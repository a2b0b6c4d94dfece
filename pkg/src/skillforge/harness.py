"""Bounded tool-use loop for meta- and base-agent sessions.

The agentic model gets a system prompt and the seven-tool set (Read, Write,
Edit, Bash, Glob, Grep, TodoWrite); the loop runs model -> tools -> model
until the model answers without tool calls or a limit fires. Every file
effect passes through the session's PermissionScope.

Bash is sandboxed at process level: commands run with cwd inside the writable
scope, a scrubbed environment, a wall-clock timeout, and static screening
that denies `..` segments, command substitution, tilde-user expansion, and
absolute paths outside the scope. This holds for cooperative agents; it is
not a container boundary, and deployments facing untrusted skills should add
OS-level isolation.
"""

from __future__ import annotations

import json
import logging
import os
import re
import subprocess
import time
from dataclasses import dataclass, field
from hashlib import sha256
from pathlib import Path
from typing import Any

from .gateway import GatewayError, ModelEndpoint, ModelGateway
from .workspace import PermissionScope

logger = logging.getLogger(__name__)

DEFAULT_MAX_TURNS = 80
DEFAULT_MAX_TOOL_CALLS = 200
DEFAULT_BASH_TIMEOUT_S = 300
READ_CAP_BYTES = 200_000
BASH_SOFT_CAP_CHARS = 30_000
BASH_HARD_CAP_CHARS = 200_000
MAX_GLOB_RESULTS = 500
MAX_GREP_RESULTS = 200

KICKOFF_MESSAGE = "Begin."

TOOL_NAMES = ("Read", "Write", "Edit", "Bash", "Glob", "Grep", "TodoWrite")

TOOL_SCHEMAS: list[dict] = [
    {
        "type": "function",
        "function": {
            "name": "Read",
            "description": "Read a file. Long files are truncated with a marker.",
            "parameters": {
                "type": "object",
                "properties": {
                    "file_path": {"type": "string"},
                    "offset": {"type": "integer", "description": "1-based first line"},
                    "limit": {"type": "integer", "description": "max lines"},
                },
                "required": ["file_path"],
            },
        },
    },
    {
        "type": "function",
        "function": {
            "name": "Write",
            "description": "Create or overwrite a file with the given content.",
            "parameters": {
                "type": "object",
                "properties": {
                    "file_path": {"type": "string"},
                    "content": {"type": "string"},
                },
                "required": ["file_path", "content"],
            },
        },
    },
    {
        "type": "function",
        "function": {
            "name": "Edit",
            "description": "Exact string replacement; errors if the match is absent or ambiguous.",
            "parameters": {
                "type": "object",
                "properties": {
                    "file_path": {"type": "string"},
                    "old_string": {"type": "string"},
                    "new_string": {"type": "string"},
                    "replace_all": {"type": "boolean"},
                },
                "required": ["file_path", "old_string", "new_string"],
            },
        },
    },
    {
        "type": "function",
        "function": {
            "name": "Bash",
            "description": "Run a shell command inside the workspace sandbox.",
            "parameters": {
                "type": "object",
                "properties": {
                    "command": {"type": "string"},
                    "timeout": {"type": "integer", "description": "seconds"},
                },
                "required": ["command"],
            },
        },
    },
    {
        "type": "function",
        "function": {
            "name": "Glob",
            "description": "List files matching a glob pattern.",
            "parameters": {
                "type": "object",
                "properties": {
                    "pattern": {"type": "string"},
                    "path": {"type": "string", "description": "search root"},
                },
                "required": ["pattern"],
            },
        },
    },
    {
        "type": "function",
        "function": {
            "name": "Grep",
            "description": "Search file contents with a regular expression.",
            "parameters": {
                "type": "object",
                "properties": {
                    "pattern": {"type": "string"},
                    "path": {"type": "string", "description": "search root"},
                    "glob": {"type": "string", "description": "filename filter"},
                },
                "required": ["pattern"],
            },
        },
    },
    {
        "type": "function",
        "function": {
            "name": "TodoWrite",
            "description": "Replace the session-local task list.",
            "parameters": {
                "type": "object",
                "properties": {
                    "todos": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "properties": {
                                "content": {"type": "string"},
                                "status": {
                                    "type": "string",
                                    "enum": ["pending", "in_progress", "completed"],
                                },
                            },
                            "required": ["content", "status"],
                        },
                    }
                },
                "required": ["todos"],
            },
        },
    },
]

_DOTDOT_RE = re.compile(r"(?<![.\w])\.\.(?![.\w])")
_SUBSTITUTION_RE = re.compile(r"\$\(|`")
_TILDE_USER_RE = re.compile(r"~[A-Za-z_]")
_ABS_PATH_RE = re.compile(r"(?:(?<=[\s\"'=:(])|^)(/[^\s\"';|&)<>]*)")
_ESCALATION_RE = re.compile(r"(?:^|[;&|(]\s*)(sudo|su|chroot|mount)\b")
_WRITEISH_RE = re.compile(
    r"(?:^|[;&|(]\s*|\|\s*)(cp|mv|rm|mkdir|rmdir|touch|chmod|chown|ln|tee|truncate|dd|install|rsync)\b"
)
_REDIRECT_RE = re.compile(r">{1,2}\s*([^\s;|&]+)")

_SECRET_ENV_HINTS = ("KEY", "TOKEN", "SECRET", "PASSWORD", "CREDENTIAL")
_SECRET_PATTERN_RE = re.compile(r"\b(sk|or|sfk)-[A-Za-z0-9_\-]{12,}\b")


class ToolError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class ToolResult:
    ok: bool
    content: str
    error_code: str | None = None

    def render(self) -> str:
        if self.ok:
            return self.content
        return f"ERROR[{self.error_code}]: {self.content}"


@dataclass
class AgentSession:
    role: str
    system_prompt: str
    scope: PermissionScope
    max_turns: int = DEFAULT_MAX_TURNS
    max_tool_calls: int = DEFAULT_MAX_TOOL_CALLS
    bash_timeout_s: int = DEFAULT_BASH_TIMEOUT_S
    transcript: list[dict] = field(default_factory=list)
    todos: list[dict] = field(default_factory=list)


def redact(text: str, secrets: tuple[str, ...] = ()) -> str:
    """Blank out configured secrets and anything shaped like an API key."""
    for value in secrets:
        if value:
            text = text.replace(value, "[REDACTED]")
    for name, value in os.environ.items():
        if value and len(value) >= 8 and any(h in name.upper() for h in _SECRET_ENV_HINTS):
            text = text.replace(value, "[REDACTED]")
    return _SECRET_PATTERN_RE.sub("[REDACTED]", text)


def screen_bash_command(command: str, scope: PermissionScope) -> str | None:
    """Static deny screening; returns a reason when the command is refused."""
    if _DOTDOT_RE.search(command):
        return "path traversal ('..') is not allowed"
    if _SUBSTITUTION_RE.search(command):
        return "command substitution is not allowed"
    if _TILDE_USER_RE.search(command):
        return "tilde user expansion is not allowed"
    if _ESCALATION_RE.search(command):
        return "privilege or namespace escalation commands are not allowed"
    abs_tokens = [m for m in _ABS_PATH_RE.findall(command) if m and m != "/dev/null"]
    for token in abs_tokens:
        if not scope.allows_read(token):
            return f"absolute path outside the permitted scope: {token}"
    wants_write = bool(_WRITEISH_RE.search(command))
    for m in _REDIRECT_RE.finditer(command):
        target = m.group(1).strip("\"'")
        if target.startswith("/") and target != "/dev/null" and not scope.allows_write(target):
            return f"redirection outside the writable scope: {target}"
    if wants_write:
        for token in abs_tokens:
            if not scope.allows_write(token):
                return f"write-capable command with a path outside the writable scope: {token}"
    return None


def _bash_env(cwd: Path) -> dict[str, str]:
    env = {
        "PATH": "/usr/local/bin:/usr/bin:/bin",
        "HOME": str(cwd),
        "TMPDIR": str(cwd / ".tmp"),
        "LANG": "C.UTF-8",
        "LC_ALL": "C.UTF-8",
        "PYTHONDONTWRITEBYTECODE": "1",
    }
    for name in ("OPENROUTER_API_KEY", "OPENROUTER_API_BASE", "SANDBOX_MODEL"):
        if os.getenv(name):
            env[name] = os.environ[name]
    return env


class ToolExecutor:
    """Executes tool calls for one session, enforcing its scope.

    `base_dir` anchors relative paths (the session's conceptual working
    directory); Bash subprocesses always run inside the first writable prefix
    so that relative writes cannot land in read-only territory.
    """

    def __init__(self, scope: PermissionScope, base_dir: Path, session: AgentSession):
        self.scope = scope
        self.base_dir = base_dir
        self.bash_cwd = Path(scope.writable[0]) if scope.writable else base_dir
        self.session = session

    def _resolve(self, path_str: str) -> Path:
        p = Path(path_str)
        return p if p.is_absolute() else self.base_dir / p

    def _check_read(self, path: Path) -> Path:
        if not self.scope.allows_read(path):
            raise ToolError("permission-denied", f"read outside the permitted scope: {path}")
        return path

    def _check_write(self, path: Path) -> Path:
        if not self.scope.allows_write(path):
            raise ToolError("permission-denied", f"write outside the permitted scope: {path}")
        return path

    def execute(self, tool: str, args: dict[str, Any]) -> ToolResult:
        if tool not in TOOL_NAMES:
            return ToolResult(False, f"unknown tool {tool!r}", "bad-args")
        try:
            handler = getattr(self, f"_tool_{tool.lower()}")
            return ToolResult(True, handler(**args))
        except ToolError as exc:
            return ToolResult(False, str(exc), exc.code)
        except TypeError as exc:
            return ToolResult(False, f"bad arguments for {tool}: {exc}", "bad-args")
        except FileNotFoundError as exc:
            return ToolResult(False, str(exc), "not-found")
        except OSError as exc:
            return ToolResult(False, str(exc), "io-error")

    def _tool_read(self, file_path: str, offset: int = 1, limit: int | None = None) -> str:
        path = self._check_read(self._resolve(file_path))
        if not path.is_file():
            raise ToolError("not-found", f"no such file: {path}")
        data = path.read_bytes()
        truncated_bytes = len(data) > READ_CAP_BYTES
        text = data[:READ_CAP_BYTES].decode("utf-8", errors="replace")
        lines = text.splitlines()
        start = max(offset - 1, 0)
        end = start + limit if limit else len(lines)
        body = "\n".join(lines[start:end])
        if truncated_bytes or (limit and end < len(lines)):
            body += f"\n[truncated: showing bytes<= {READ_CAP_BYTES} lines {start + 1}-{min(end, len(lines))}]"
        return body

    def _tool_write(self, file_path: str, content: str) -> str:
        path = self._check_write(self._resolve(file_path))
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(content, encoding="utf-8")
        return f"wrote {len(content.encode('utf-8'))} bytes to {path}"

    def _tool_edit(
        self, file_path: str, old_string: str, new_string: str, replace_all: bool = False
    ) -> str:
        path = self._resolve(file_path)
        self._check_read(path)
        self._check_write(path)
        if not path.is_file():
            raise ToolError("not-found", f"no such file: {path}")
        text = path.read_text(encoding="utf-8")
        count = text.count(old_string)
        if count == 0:
            raise ToolError("no-match", "old_string not found in file")
        if count > 1 and not replace_all:
            raise ToolError("ambiguous-match", f"old_string occurs {count} times; pass replace_all")
        path.write_text(text.replace(old_string, new_string), encoding="utf-8")
        return f"replaced {count if replace_all else 1} occurrence(s) in {path}"

    def _tool_bash(self, command: str, timeout: int | None = None) -> str:
        if not self.scope.executable_allowed:
            raise ToolError("permission-denied", "command execution is disabled for this session")
        reason = screen_bash_command(command, self.scope)
        if reason is not None:
            raise ToolError("permission-denied", reason)
        self.bash_cwd.mkdir(parents=True, exist_ok=True)
        (self.bash_cwd / ".tmp").mkdir(exist_ok=True)
        limit = min(timeout or self.session.bash_timeout_s, self.session.bash_timeout_s)
        try:
            proc = subprocess.run(
                ["bash", "-c", command],
                cwd=self.bash_cwd,
                env=_bash_env(self.bash_cwd),
                capture_output=True,
                text=True,
                timeout=limit,
            )
        except subprocess.TimeoutExpired:
            raise ToolError("timeout", f"command exceeded {limit}s")
        output = proc.stdout
        if proc.stderr:
            output += ("\n[stderr]\n" + proc.stderr) if output else proc.stderr
        if len(output) > BASH_HARD_CAP_CHARS:
            raise ToolError("oversized-output", f"command produced {len(output)} chars of output")
        if len(output) > BASH_SOFT_CAP_CHARS:
            output = output[:BASH_SOFT_CAP_CHARS] + "\n[output truncated]"
        if proc.returncode != 0:
            output += f"\n[exit code {proc.returncode}]"
        return output or "(no output)"

    def _tool_glob(self, pattern: str, path: str | None = None) -> str:
        root = self._check_read(self._resolve(path or "."))
        matches = []
        for p in sorted(root.glob(pattern)):
            if self.scope.allows_read(p):
                matches.append(str(p))
            if len(matches) >= MAX_GLOB_RESULTS:
                matches.append("[result list truncated]")
                break
        return "\n".join(matches) if matches else "(no matches)"

    def _tool_grep(self, pattern: str, path: str | None = None, glob: str | None = None) -> str:
        root = self._check_read(self._resolve(path or "."))
        try:
            rx = re.compile(pattern)
        except re.error as exc:
            raise ToolError("bad-args", f"invalid regex: {exc}")
        results: list[str] = []
        candidates = sorted(root.rglob(glob or "*")) if root.is_dir() else [root]
        for p in candidates:
            if not p.is_file() or not self.scope.allows_read(p):
                continue
            try:
                text = p.read_text(encoding="utf-8", errors="replace")
            except OSError:
                continue
            for n, line in enumerate(text.splitlines(), start=1):
                if rx.search(line):
                    results.append(f"{p}:{n}:{line.strip()[:500]}")
                    if len(results) >= MAX_GREP_RESULTS:
                        results.append("[result list truncated]")
                        return "\n".join(results)
        return "\n".join(results) if results else "(no matches)"

    def _tool_todowrite(self, todos: list[dict]) -> str:
        self.session.todos = list(todos)
        lines = [f"- [{t.get('status', 'pending')}] {t.get('content', '')}" for t in todos]
        return "updated todo list:\n" + "\n".join(lines)


def exec_tool(
    tool: str,
    args: dict[str, Any],
    scope: PermissionScope,
    base_dir: Path,
    session: AgentSession | None = None,
) -> ToolResult:
    """Single tool invocation outside a full session (tests, transcript replay)."""
    session = session or AgentSession(role="replay", system_prompt="", scope=scope)
    return ToolExecutor(scope, base_dir, session).execute(tool, args)


class TranscriptWriter:
    def __init__(self, path: Path | None, secrets: tuple[str, ...] = ()):
        self.path = path
        self.secrets = secrets
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("", encoding="utf-8")

    def emit(self, session: AgentSession, event: dict) -> None:
        event = {"ts": round(time.time(), 3), **event}
        session.transcript.append(event)
        if self.path is not None:
            line = redact(json.dumps(event, ensure_ascii=False), self.secrets)
            with self.path.open("a", encoding="utf-8") as f:
                f.write(line + "\n")


def run_session(
    gateway: ModelGateway,
    endpoint: ModelEndpoint,
    session: AgentSession,
    base_dir: Path,
    transcript_path: Path | None = None,
    kickoff: str = KICKOFF_MESSAGE,
) -> tuple[list[dict], str]:
    """Run the tool loop; returns (transcript, termination).

    termination is one of natural | turn-limit | tool-limit | fault. File
    effects made before a fault stay on disk.
    """
    writer = TranscriptWriter(transcript_path, secrets=(endpoint.api_key,))
    executor = ToolExecutor(session.scope, base_dir, session)
    messages: list[dict] = [
        {"role": "system", "content": session.system_prompt},
        {"role": "user", "content": kickoff},
    ]
    tool_calls_used = 0
    termination = "turn-limit"

    for _turn in range(session.max_turns):
        try:
            message = gateway.chat_messages(endpoint, messages, tools=TOOL_SCHEMAS)
        except GatewayError as exc:
            writer.emit(session, {"event": "fault", "role": session.role, "error": str(exc)})
            return session.transcript, "fault"
        writer.emit(
            session,
            {
                "event": "assistant",
                "role": session.role,
                "content": message.get("content"),
                "n_tool_calls": len(message.get("tool_calls") or []),
            },
        )
        tool_calls = message.get("tool_calls") or []
        if not tool_calls:
            termination = "natural"
            break
        messages.append(
            {"role": "assistant", "content": message.get("content"), "tool_calls": tool_calls}
        )
        hit_limit = False
        for tc in tool_calls:
            if tool_calls_used >= session.max_tool_calls:
                hit_limit = True
                break
            name = tc.get("function", {}).get("name", "")
            try:
                args = json.loads(tc.get("function", {}).get("arguments") or "{}")
            except json.JSONDecodeError:
                args = {}
            tool_calls_used += 1
            writer.emit(session, {"event": "tool_call", "role": session.role, "tool": name, "args": args})
            result = executor.execute(name, args)
            rendered = result.render()
            writer.emit(
                session,
                {
                    "event": "tool_result",
                    "role": session.role,
                    "tool": name,
                    "ok": result.ok,
                    "error_code": result.error_code,
                    "digest": sha256(rendered.encode("utf-8")).hexdigest()[:16],
                    "content": rendered[:4000],
                },
            )
            messages.append(
                {"role": "tool", "tool_call_id": tc.get("id", ""), "content": rendered}
            )
        if hit_limit:
            termination = "tool-limit"
            break

    writer.emit(
        session,
        {"event": "termination", "role": session.role, "termination": termination, "tool_calls": tool_calls_used},
    )
    return session.transcript, termination


def replay_transcript(
    transcript_path: Path, scope: PermissionScope, base_dir: Path
) -> list[ToolResult]:
    """Re-execute the tool calls of a persisted transcript (deterministic tool semantics)."""
    session = AgentSession(role="replay", system_prompt="", scope=scope)
    executor = ToolExecutor(scope, base_dir, session)
    results = []
    for line in transcript_path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        event = json.loads(line)
        if event.get("event") == "tool_call":
            results.append(executor.execute(event["tool"], event.get("args", {})))
    return results
