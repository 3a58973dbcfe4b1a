"""Cleaned text renditions per crash and exact-duplicate collapsing."""

from __future__ import annotations

import enum
import hashlib
import json
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

from .ingest import AsanReport, CrashRecord, StackFrame, StackTrace, parse_asan, parse_trace


class SourceKind(str, enum.Enum):
    FULL_TRACE = "full"
    COARSE_TRACE = "coarse"
    ASAN_REPORT = "asan"


ALL_SOURCES = (SourceKind.FULL_TRACE, SourceKind.COARSE_TRACE, SourceKind.ASAN_REPORT)

# field names used in prepared.jsonl
JSON_FIELDS = {
    SourceKind.FULL_TRACE: "full_trace",
    SourceKind.COARSE_TRACE: "coarse_trace",
    SourceKind.ASAN_REPORT: "asan",
}


@dataclass(frozen=True)
class SourceConfig:
    enabled: frozenset[SourceKind] = frozenset(ALL_SOURCES)
    asan_keep_traces: bool = False

    def __post_init__(self) -> None:
        if not self.enabled:
            raise ValueError("at least one source kind must be enabled")
        object.__setattr__(self, "enabled", frozenset(SourceKind(k) for k in self.enabled))

    @classmethod
    def parse(cls, spec: str, asan_keep_traces: bool = False) -> SourceConfig:
        """Build from a comma list such as ``"full,coarse"``."""
        names = [part.strip() for part in spec.split(",") if part.strip()]
        try:
            kinds = frozenset(SourceKind(name) for name in names)
        except ValueError as exc:
            raise ValueError(f"unknown source in {spec!r}; expected a subset of full,coarse,asan") from exc
        return cls(kinds, asan_keep_traces)

    def ordered(self) -> list[SourceKind]:
        return [k for k in ALL_SOURCES if k in self.enabled]


def content_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class PreparedRecord:
    id: str
    texts: Mapping[SourceKind, str] = field(default_factory=dict)
    hashes: Mapping[SourceKind, str] = field(default_factory=dict)

    @classmethod
    def from_texts(cls, record_id: str, texts: Mapping[SourceKind, str]) -> PreparedRecord:
        ordered = {k: texts[k] for k in ALL_SOURCES if k in texts}
        return cls(record_id, ordered, {k: content_hash(v) for k, v in ordered.items()})

    def signature(self) -> tuple[tuple[str, str | None], ...]:
        return tuple((k.value, self.hashes.get(k)) for k in ALL_SOURCES)

    def to_json(self) -> str:
        row: dict[str, object] = {"id": self.id}
        for kind, text in self.texts.items():
            row[JSON_FIELDS[kind]] = text
        row["hashes"] = {k.value: h for k, h in self.hashes.items()}
        return json.dumps(row, sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> PreparedRecord:
        row = json.loads(line)
        texts = {k: row[name] for k, name in JSON_FIELDS.items() if name in row}
        record = cls.from_texts(row["id"], texts)
        stored = {SourceKind(k): v for k, v in row.get("hashes", {}).items()}
        if stored != dict(record.hashes):
            raise ValueError(f"hash mismatch in prepared record {record.id!r}")
        return record


@dataclass(frozen=True)
class Unpreparable:
    """A crash that produced none of the enabled sources."""

    id: str
    reason: str


# --- trace transforms -----------------------------------------------------

_RAW_PREFIX = re.compile(r"^\s*#\d+\s+(?:0x[0-9a-fA-F]+\s+in\s+)?")
_FUNCTION_TOKEN = re.compile(r"[^\s(]+")


def frame_key(frame: StackFrame) -> tuple:
    if frame.is_raw:
        return ("raw", _RAW_PREFIX.sub("", frame.raw).strip())
    return (frame.function, frame.arguments, frame.location)


def dedupe_frames(trace: StackTrace) -> StackTrace:
    """Keep only the topmost copy of each repeated frame."""
    seen: set[tuple] = set()
    kept = []
    for frame in trace.frames:
        key = frame_key(frame)
        if key in seen:
            continue
        seen.add(key)
        kept.append(frame)
    return StackTrace(tuple(kept))


def _blank_raw_arguments(text: str) -> str:
    prefix = _RAW_PREFIX.match(text)
    start = prefix.end() if prefix else 0
    token = _FUNCTION_TOKEN.search(text, start)
    if token is None:
        return text
    open_at = text.find("(", token.end())
    if open_at < 0:
        return text
    depth = 0
    for i in range(open_at, len(text)):
        if text[i] == "(":
            depth += 1
        elif text[i] == ")":
            depth -= 1
            if depth == 0:
                return text[: open_at + 1] + text[i:]
    return text


def strip_arguments(trace: StackTrace) -> StackTrace:
    frames = []
    for frame in trace.frames:
        if frame.is_raw:
            frames.append(replace(frame, raw=_blank_raw_arguments(frame.raw)))
        else:
            frames.append(replace(frame, arguments=""))
    return StackTrace(tuple(frames))


def render_frame(frame: StackFrame) -> str:
    if frame.is_raw:
        return frame.raw
    text = f"#{frame.index} {frame.function} ({frame.arguments})"
    if frame.location is not None:
        text += f" {frame.location_kind} {frame.location}"
    return text


def render_trace(trace: StackTrace) -> str:
    """Canonical text of a trace, one frame per line, addresses omitted."""
    return "\n".join(render_frame(f) for f in trace.frames)


def clean_asan(report: AsanReport, keep_traces: bool) -> str:
    dropped = {"shadow_map", "shadow_legend"}
    if not keep_traces:
        dropped.add("trace_block")
    return "".join(s.text for s in report.sections if s.tag not in dropped)


# --- per-record preparation ----------------------------------------------

MAX_TEXT_BYTES = 100_000


def cap_text(text: str, limit: int = MAX_TEXT_BYTES) -> tuple[str, bool]:
    """Cut ``text`` to at most ``limit`` UTF-8 bytes at a line boundary."""
    data = text.encode("utf-8")
    if len(data) <= limit:
        return text, False
    cut = data.rfind(b"\n", 0, limit + 1)
    if cut <= 0:
        # a single enormous line; fall back to a character boundary
        return data[:limit].decode("utf-8", errors="ignore"), True
    return data[:cut].decode("utf-8", errors="ignore"), True


def prepare(record: CrashRecord, config: SourceConfig) -> PreparedRecord | Unpreparable:
    texts: dict[SourceKind, str] = {}
    enabled = config.enabled
    if SourceKind.FULL_TRACE in enabled or SourceKind.COARSE_TRACE in enabled:
        trace = dedupe_frames(parse_trace(record.trace_text))
        if SourceKind.FULL_TRACE in enabled:
            texts[SourceKind.FULL_TRACE] = render_trace(trace)
        if SourceKind.COARSE_TRACE in enabled:
            texts[SourceKind.COARSE_TRACE] = render_trace(strip_arguments(trace))
    if SourceKind.ASAN_REPORT in enabled and record.asan_text is not None:
        texts[SourceKind.ASAN_REPORT] = clean_asan(parse_asan(record.asan_text), config.asan_keep_traces)

    # an empty rendition carries nothing to embed
    texts = {k: v for k, v in texts.items() if v.strip()}
    if not texts:
        wanted = ",".join(k.value for k in config.ordered())
        return Unpreparable(record.id, f"no usable source among enabled kinds ({wanted})")
    return PreparedRecord.from_texts(record.id, texts)


def collapse_duplicates(
    records: Iterable[PreparedRecord],
) -> tuple[list[PreparedRecord], dict[str, str]]:
    """Group records whose cleaned sources are all identical.

    Returns the representatives (lowest id per class, sorted by id) and a
    mapping from every input id to its representative's id.
    """
    classes: dict[tuple, list[PreparedRecord]] = {}
    for record in records:
        classes.setdefault(record.signature(), []).append(record)

    representatives = []
    assignment: dict[str, str] = {}
    for members in classes.values():
        rep = min(members, key=lambda r: r.id)
        representatives.append(rep)
        for member in members:
            assignment[member.id] = rep.id
    representatives.sort(key=lambda r: r.id)
    return representatives, dict(sorted(assignment.items()))
