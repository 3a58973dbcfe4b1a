"""Corpus loading and parsing of debugger backtraces and ASan reports."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path


class CorpusError(Exception):
    """Raised when a crash corpus directory cannot be loaded."""


@dataclass(frozen=True)
class CrashRecord:
    id: str
    trace_text: str
    asan_text: str | None = None


@dataclass(frozen=True)
class CorpusLayout:
    """Where the per-crash files live.

    Only the flat layout is supported: ``<dir>/<id>.trace`` plus an optional
    ``<dir>/<id>.asan``. Subdirectories are searched too, so a stem that
    shows up twice anywhere below ``dir`` is reported as a duplicate id.
    """

    trace_suffix: str = ".trace"
    asan_suffix: str = ".asan"
    recursive: bool = True


FLAT = CorpusLayout()


def _read_text(path: Path) -> str:
    try:
        return path.read_bytes().decode("utf-8", errors="replace")
    except OSError as exc:
        raise CorpusError(f"cannot read {path}: {exc}") from exc


def _collect(directory: Path, suffix: str, recursive: bool) -> dict[str, Path]:
    pattern = f"*{suffix}"
    paths = directory.rglob(pattern) if recursive else directory.glob(pattern)
    found: dict[str, Path] = {}
    for path in sorted(paths):
        if not path.is_file():
            continue
        stem = path.name[: -len(suffix)]
        if stem in found:
            raise CorpusError(f"duplicate id {stem!r}: {found[stem]} and {path}")
        found[stem] = path
    return found


def load_corpus(directory: str | Path, layout: CorpusLayout = FLAT) -> list[CrashRecord]:
    """Load every crash under ``directory``, sorted by id."""
    directory = Path(directory)
    if not directory.is_dir():
        raise CorpusError(f"corpus directory does not exist: {directory}")

    traces = _collect(directory, layout.trace_suffix, layout.recursive)
    asans = _collect(directory, layout.asan_suffix, layout.recursive)

    orphans = sorted(set(asans) - set(traces))
    if orphans:
        raise CorpusError(f"sanitizer report without trace file for id(s): {', '.join(orphans)}")

    records = []
    for crash_id in sorted(traces):
        trace_text = _read_text(traces[crash_id])
        if not trace_text.strip():
            raise CorpusError(f"empty trace file for id {crash_id!r}: {traces[crash_id]}")
        asan_path = asans.get(crash_id)
        asan_text = _read_text(asan_path) if asan_path is not None else None
        records.append(CrashRecord(crash_id, trace_text, asan_text))
    return records


# --- backtraces -----------------------------------------------------------

@dataclass(frozen=True)
class StackFrame:
    """One logical backtrace frame.

    ``raw`` always holds the original text (continuation lines joined with
    newlines). A frame whose text did not match the grammar has
    ``is_raw=True`` and no structured fields.
    """

    raw: str
    index: int | None = None
    address: str | None = None
    function: str = ""
    arguments: str = ""
    location: str | None = None
    location_kind: str = "at"
    is_raw: bool = False

    @classmethod
    def raw_frame(cls, text: str) -> StackFrame:
        return cls(raw=text, is_raw=True)


@dataclass(frozen=True)
class StackTrace:
    frames: tuple[StackFrame, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.frames)


_FRAME_HEAD = re.compile(r"^\s*#(?P<index>\d+)\s+(?:(?P<address>0x[0-9a-fA-F]+)\s+in\s+)?(?P<body>.*)$", re.S)
_FRAME_TAIL = re.compile(r"\)\s+(?P<kind>at|from)\s+(?P<location>[^()]+?)\s*$")


def _matching_open(text: str, close: int) -> int | None:
    """Index of the '(' balancing the ')' at ``close``, scanning backwards."""
    depth = 0
    for i in range(close, -1, -1):
        ch = text[i]
        if ch == ")":
            depth += 1
        elif ch == "(":
            depth -= 1
            if depth == 0:
                return i
    return None


def parse_frame(text: str) -> StackFrame:
    """Parse one logical frame; returns a raw frame when the grammar fails."""
    joined = " ".join(part.strip() for part in text.splitlines() if part.strip())
    head = _FRAME_HEAD.match(joined)
    if head is None:
        return StackFrame.raw_frame(text)

    body = head["body"].rstrip()
    location = None
    kind = "at"
    tail = _FRAME_TAIL.search(body)
    if tail is not None:
        location = tail["location"]
        kind = tail["kind"]
        body = body[: tail.start() + 1]

    if not body.endswith(")"):
        return StackFrame.raw_frame(text)
    open_at = _matching_open(body, len(body) - 1)
    if open_at is None:
        return StackFrame.raw_frame(text)
    function = body[:open_at].strip()
    if not function:
        return StackFrame.raw_frame(text)

    return StackFrame(
        raw=text,
        index=int(head["index"]),
        address=head["address"],
        function=function,
        arguments=body[open_at + 1 : -1],
        location=location,
        location_kind=kind,
    )


def parse_trace(text: str) -> StackTrace:
    """Parse GDB ``bt`` output into frames, topmost first.

    Lines starting with ``#`` open a new frame; other non-blank lines are
    continuations of the frame before them, or stand-alone raw frames when
    no frame has been opened yet. Blank lines carry no frame content and are
    skipped.
    """
    groups: list[list[str]] = []
    opened = False
    for line in text.splitlines():
        if not line.strip():
            continue
        if line.lstrip().startswith("#"):
            groups.append([line])
            opened = True
        elif opened:
            groups[-1].append(line)
        else:
            groups.append([line])
    return StackTrace(tuple(parse_frame("\n".join(group)) for group in groups))


# --- sanitizer reports ----------------------------------------------------

SECTION_TAGS = ("header", "error_line", "trace_block", "memory_info", "shadow_map", "shadow_legend", "other")

_ERROR_MARK = re.compile(r"(?:ERROR|SUMMARY): AddressSanitizer")
_ASAN_FRAME = re.compile(r"^\s*#\d+\s")
_MEMORY_INFO = re.compile(r"is located|allocated by thread|freed by thread|previously allocated by")
_SHADOW_MAP = "Shadow bytes around the buggy address"
_SHADOW_LEGEND = "Shadow byte legend"


@dataclass(frozen=True)
class AsanSection:
    tag: str
    lines: tuple[str, ...]

    @property
    def text(self) -> str:
        return "".join(self.lines)


@dataclass(frozen=True)
class AsanReport:
    sections: tuple[AsanSection, ...]

    @property
    def text(self) -> str:
        return "".join(s.text for s in self.sections)


def _line_tags(lines: list[str]) -> list[str]:
    tags: list[str] = []
    seen_error = False
    mode = None  # "map" or "legend" while inside a shadow block
    for line in lines:
        blank = not line.strip()
        if _SHADOW_LEGEND in line:
            mode = "legend"
        elif _SHADOW_MAP in line:
            mode = "map"
        elif mode is not None and blank:
            # the map runs up to the legend; only a blank line ends it early
            mode = None

        if mode == "map":
            tags.append("shadow_map")
        elif mode == "legend":
            tags.append("shadow_legend")
        elif not seen_error and _ERROR_MARK.search(line):
            seen_error = True
            tags.append("error_line")
        elif _ASAN_FRAME.match(line):
            tags.append("trace_block")
        elif _MEMORY_INFO.search(line):
            tags.append("memory_info")
        elif not seen_error:
            tags.append("header")
        else:
            tags.append("other")
    return tags


def parse_asan(text: str) -> AsanReport:
    """Split a sanitizer report into tagged blocks of consecutive lines.

    Line endings are kept, so joining every section reproduces ``text``
    exactly.
    """
    lines = text.splitlines(keepends=True)
    sections: list[AsanSection] = []
    current_tag = None
    current: list[str] = []
    for line, tag in zip(lines, _line_tags(lines)):
        if tag != current_tag and current:
            sections.append(AsanSection(current_tag, tuple(current)))
            current = []
        current_tag = tag
        current.append(line)
    if current:
        sections.append(AsanSection(current_tag, tuple(current)))
    return AsanReport(tuple(sections))
