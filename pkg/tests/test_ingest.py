from __future__ import annotations

import pytest
from hypothesis import given, strategies as st

from crashbucket.ingest import CorpusError, CrashRecord, load_corpus, parse_asan, parse_frame, parse_trace

ASAN_SAMPLE = """\
=================================================================
==4242==ERROR: AddressSanitizer: heap-buffer-overflow on address 0x602000000011 at pc 0x4f3a bp 0x7ffd sp 0x7ffd
READ of size 1 at 0x602000000011 thread T0
    #0 0x4f3a in parse_header /src/lib/header.c:88:14
    #1 0x4f99 in main /src/main.c:12:3

0x602000000011 is located 0 bytes to the right of 1-byte region [0x602000000010,0x602000000011)
allocated by thread T0 here:
    #0 0x4a1b in malloc
    #1 0x4f70 in main /src/main.c:10:18

SUMMARY: AddressSanitizer: heap-buffer-overflow /src/lib/header.c:88:14 in parse_header
Shadow bytes around the buggy address:
  0x0c047fff7fb0: 00 00 00 00 00 00 00 00 00 00 00 00 00 00 00 00
=>0x0c047fff8000: fa fa[01]fa fa fa fa fa fa fa fa fa fa fa fa fa
Shadow byte legend (one shadow byte represents 8 application bytes):
  Addressable:           00
  Heap left redzone:       fa
==4242==ABORTING
"""


def _write(path, text):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


# --- load_corpus ----------------------------------------------------------

def test_load_flat_layout(tmp_path):
    _write(tmp_path / "a.trace", "#0 f () at a.c:1\n")
    _write(tmp_path / "a.asan", "report\n")
    _write(tmp_path / "b.trace", "#0 g () at b.c:2\n")
    assert load_corpus(tmp_path) == [
        CrashRecord("a", "#0 f () at a.c:1\n", "report\n"),
        CrashRecord("b", "#0 g () at b.c:2\n", None),
    ]


def test_load_empty_directory(tmp_path):
    assert load_corpus(tmp_path) == []


def test_duplicate_id_in_nested_folder(tmp_path):
    _write(tmp_path / "a.trace", "#0 f () at a.c:1\n")
    _write(tmp_path / "nested" / "a.trace", "#0 f () at a.c:1\n")
    with pytest.raises(CorpusError, match="'a'"):
        load_corpus(tmp_path)


def test_missing_directory(tmp_path):
    with pytest.raises(CorpusError, match="does not exist"):
        load_corpus(tmp_path / "nope")


def test_orphan_report_and_empty_trace_are_errors(tmp_path):
    _write(tmp_path / "x.asan", "r\n")
    with pytest.raises(CorpusError, match="x"):
        load_corpus(tmp_path)
    (tmp_path / "x.asan").unlink()
    _write(tmp_path / "y.trace", "  \n")
    with pytest.raises(CorpusError, match="y"):
        load_corpus(tmp_path)


def test_invalid_utf8_is_replaced(tmp_path):
    (tmp_path / "bad.trace").write_bytes(b"#0 f (s=\"\xff\xfe\") at a.c:1\n")
    (record,) = load_corpus(tmp_path)
    assert "�" in record.trace_text


def test_load_is_sorted_and_stable(tmp_path):
    for name in ("c", "a", "b"):
        _write(tmp_path / f"{name}.trace", f"#0 {name} () at x.c:1\n")
    first = load_corpus(tmp_path)
    assert [r.id for r in first] == ["a", "b", "c"]
    assert load_corpus(tmp_path) == first


# --- backtraces -----------------------------------------------------------

def test_frame_with_address_and_location():
    f = parse_frame("#0  0x0000555555554abc in foo (a=1, b=0x0) at foo.c:42")
    assert (f.index, f.address, f.function, f.arguments, f.location) == (
        0, "0x0000555555554abc", "foo", "a=1, b=0x0", "foo.c:42",
    )
    assert not f.is_raw


def test_frame_from_shared_object():
    f = parse_frame("#3  bar () from /lib/libz.so")
    assert (f.index, f.address, f.function, f.arguments, f.location, f.location_kind) == (
        3, None, "bar", "", "/lib/libz.so", "from",
    )


def test_frame_nested_parentheses_in_arguments():
    f = parse_frame("#1 0x1 in cb (fn=0x4 <h(int)>, v=(1,(2))) at x.cc:9")
    assert f.function == "cb"
    assert f.arguments == "fn=0x4 <h(int)>, v=(1,(2))"
    assert f.location == "x.cc:9"


def test_frame_without_location():
    f = parse_frame("#2 0x00007ffff7a42f45 in __libc_start_main (main=0x4005d6, argc=1)")
    assert f.function == "__libc_start_main" and f.location is None


def test_garbage_line_is_raw_frame():
    trace = parse_trace("??")
    assert len(trace) == 1
    assert trace.frames[0].is_raw and trace.frames[0].raw == "??"


def test_continuation_lines_attach_to_previous_frame():
    text = "#0  foo (a=1,\n    b=2) at foo.c:3\n#1  main () at m.c:1\n"
    trace = parse_trace(text)
    assert len(trace) == 2
    assert trace.frames[0].arguments == "a=1, b=2"
    assert trace.frames[0].raw == "#0  foo (a=1,\n    b=2) at foo.c:3"


def test_unbalanced_frame_degrades_to_raw():
    f = parse_frame("#4 0x1 in broken (a=1 at x.c:2")
    assert f.is_raw and f.raw == "#4 0x1 in broken (a=1 at x.c:2"


frame_line = st.one_of(
    st.builds(
        lambda i, fn, args, loc: f"#{i}  {fn} ({args}) at {loc}",
        st.integers(0, 9999),
        st.from_regex(r"[A-Za-z_][A-Za-z0-9_:]{0,12}", fullmatch=True),
        st.from_regex(r"[a-z]=[0-9x]{1,6}(, [a-z]=[0-9]{1,3}){0,2}", fullmatch=True) | st.just(""),
        st.from_regex(r"[a-z/]{1,10}\.c:[0-9]{1,4}", fullmatch=True),
    ),
    st.text(st.characters(blacklist_categories=("Cs", "Cc", "Zl", "Zp")), min_size=1).filter(lambda s: s.strip()),
)


@given(st.lists(frame_line, max_size=12))
def test_parse_trace_preserves_frame_lines(lines):
    lines = [line for line in lines if line.strip()]
    trace = parse_trace("\n".join(lines))
    rebuilt = "\n".join(frame.raw for frame in trace.frames)
    assert rebuilt == "\n".join(lines)


# --- sanitizer reports ----------------------------------------------------

def _tags(report):
    return [s.tag for s in report.sections]


def test_asan_sections_tagged():
    report = parse_asan(ASAN_SAMPLE)
    tags = _tags(report)
    assert tags[:3] == ["header", "error_line", "other"]
    assert "trace_block" in tags and "memory_info" in tags
    shadow = [s for s in report.sections if s.tag == "shadow_map"]
    legend = [s for s in report.sections if s.tag == "shadow_legend"]
    assert len(shadow) == 1 and shadow[0].lines[0].startswith("Shadow bytes around")
    assert len(shadow[0].lines) == 3
    assert len(legend) == 1 and legend[0].lines[0].startswith("Shadow byte legend")
    first_trace = next(s for s in report.sections if s.tag == "trace_block")
    assert first_trace.lines[0].lstrip().startswith("#0 0x4f3a in parse_header")


def test_asan_reconstruction_exact():
    assert parse_asan(ASAN_SAMPLE).text == ASAN_SAMPLE


@given(st.text())
def test_asan_round_trip_any_text(text):
    assert parse_asan(text).text == text


@given(st.lists(st.sampled_from(ASAN_SAMPLE.splitlines(keepends=True)) | st.text(max_size=30), max_size=40))
def test_asan_round_trip_shuffled_report_lines(parts):
    text = "".join(parts)
    assert parse_asan(text).text == text
