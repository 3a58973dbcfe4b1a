"""Generate a labelled toy crash corpus (GDB traces + ASan reports).

Each bug family has its own crashing function chain and sanitizer error
kind. Individual crashes vary in argument values, addresses, PIDs, line
numbers of harness frames and in a random selection of generic helper
frames, so no two generated crashes are identical unless deliberately
copied.
"""

from __future__ import annotations

import argparse
import csv
import random
from dataclasses import dataclass
from pathlib import Path


@dataclass(frozen=True)
class Family:
    label: str
    bug_type: str
    error_kind: str
    access: str
    frames: tuple[tuple[str, str, str], ...]  # (function, argument template, location)
    recursive: str | None = None


FAMILIES = (
    Family(
        label="png-row-overflow",
        bug_type="Out-of-bounds Read",
        error_kind="heap-buffer-overflow",
        access="READ",
        frames=(
            ("png_combine_row", "png_ptr={ptr}, dp={ptr}, display={int}", "png/pngrutil.c:3221"),
            ("png_read_row", "png_ptr={ptr}, row={ptr}, dsp_row=0x0", "png/pngread.c:590"),
            ("png_read_image", "png_ptr={ptr}, image={ptr}", "png/pngread.c:742"),
            ("decode_png_frame", "ctx={ptr}, len={int}", "tools/png2svg.c:118"),
        ),
    ),
    Family(
        label="xml-node-uaf",
        bug_type="Use After Free",
        error_kind="heap-use-after-free",
        access="WRITE",
        frames=(
            ("xmlUnlinkNode", "cur={ptr}", "libxml2/tree.c:3869"),
            ("xmlFreeNodeList", "cur={ptr}", "libxml2/tree.c:3645"),
            ("xmlXIncludeDoProcess", "ctxt={ptr}, doc={ptr}, tree={ptr}, skipRoot={int}", "libxml2/xinclude.c:2127"),
            ("xmlXIncludeProcessFlags", "doc={ptr}, flags={int}", "libxml2/xinclude.c:2201"),
        ),
    ),
    Family(
        label="expr-stack-exhaustion",
        bug_type="Uncontrolled Recursion",
        error_kind="stack-overflow",
        access="WRITE",
        frames=(
            ("tok_next_char", "lex={ptr}, pos={int}", "calc/lexer.c:77"),
            ("parse_primary", "p={ptr}, depth={int}", "calc/parser.c:212"),
        ),
        recursive="parse_expression",
    ),
)

HELPERS = (
    ("dispatch_input", "buf={ptr}, size={int}"),
    ("run_one_input", "data={ptr}, size={int}"),
    ("fuzz_entry_wrapper", "argc={int}, argv={ptr}"),
    ("stream_fill_buffer", "s={ptr}, want={int}"),
    ("io_read_all", "fd={int}, out={ptr}"),
    ("harness_reset_state", "st={ptr}"),
)


def _fill(template: str, rng: random.Random) -> str:
    out = template
    while "{ptr}" in out:
        out = out.replace("{ptr}", f"0x{rng.randrange(0x600000000000, 0x7fffffffffff):012x}", 1)
    while "{int}" in out:
        out = out.replace("{int}", str(rng.randrange(0, 5000)), 1)
    return out


def _addr(rng: random.Random) -> str:
    return f"0x{rng.randrange(0x555555554000, 0x5555559fffff):016x}"


def _frames(family: Family, rng: random.Random) -> list[tuple[str, str, str]]:
    frames = [(f, _fill(a, rng), loc) for f, a, loc in family.frames]
    if family.recursive:
        depth = rng.randrange(50, 400)
        frames += [(family.recursive, _fill("p={ptr}, prec={int}", rng), "calc/parser.c:158")] * depth
    for name, args in rng.sample(HELPERS, rng.randrange(1, 4)):
        frames.append((name, _fill(args, rng), f"harness/driver.c:{rng.randrange(10, 400)}"))
    frames.append(("main", _fill("argc={int}, argv={ptr}", rng), "harness/main.c:31"))
    return frames


def render_gdb(frames: list[tuple[str, str, str]], rng: random.Random) -> str:
    lines = []
    for i, (func, args, loc) in enumerate(frames):
        if i == 0:
            lines.append(f"#{i}  {func} ({args}) at {loc}")
        else:
            lines.append(f"#{i}  {_addr(rng)} in {func} ({args}) at {loc}")
    return "\n".join(lines) + "\n"


def render_asan(family: Family, frames: list[tuple[str, str, str]], rng: random.Random) -> str:
    pid = rng.randrange(1000, 99999)
    addr = f"0x{rng.randrange(0x602000000000, 0x631000000000):012x}"
    top = frames[0]
    out = ["=================================================================\n"]
    out.append(
        f"=={pid}==ERROR: AddressSanitizer: {family.error_kind} on address {addr} "
        f"at pc {_addr(rng)} bp 0x7ffd{rng.randrange(16**8):08x} sp 0x7ffd{rng.randrange(16**8):08x}\n"
    )
    out.append(f"{family.access} of size {rng.choice((1, 2, 4, 8))} at {addr} thread T0\n")
    for i, (func, _, loc) in enumerate(frames[:12]):
        out.append(f"    #{i} {_addr(rng)} in {func} /src/{loc}:{rng.randrange(1, 40)}\n")
    out.append("\n")
    if family.error_kind != "stack-overflow":
        out.append(f"{addr} is located 0 bytes to the right of {rng.choice((16, 32, 64))}-byte region\n")
        out.append("allocated by thread T0 here:\n")
        out.append(f"    #0 {_addr(rng)} in malloc\n")
        out.append(f"    #1 {_addr(rng)} in {frames[1][0]} /src/{frames[1][2]}\n")
        out.append("\n")
    out.append(f"SUMMARY: AddressSanitizer: {family.error_kind} /src/{top[2]} in {top[0]}\n")
    out.append("Shadow bytes around the buggy address:\n")
    for _ in range(5):
        cells = " ".join(rng.choice(("00", "fa", "fd", "04")) for _ in range(16))
        out.append(f"  0x0c04{rng.randrange(16**8):08x}: {cells}\n")
    out.append("Shadow byte legend (one shadow byte represents 8 application bytes):\n")
    out.append("  Addressable:           00\n")
    out.append("  Partially addressable: 01 02 03 04 05 06 07\n")
    out.append("  Heap left redzone:       fa\n")
    out.append("  Freed heap region:       fd\n")
    out.append(f"=={pid}==ABORTING\n")
    return "".join(out)


def generate(out_dir: str | Path, n_unique: int = 280, n_duplicates: int = 20, seed: int = 7) -> dict[str, str]:
    """Write ``<id>.trace``/``<id>.asan`` files and ``truth.csv``; return id -> label.

    ``truth.csv`` is written next to (not inside) the corpus directory so the
    corpus holds only crash files.
    """
    rng = random.Random(seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    crashes = []
    for k in range(n_unique):
        family = FAMILIES[k % len(FAMILIES)]
        frames = _frames(family, rng)
        crashes.append((family, render_gdb(frames, rng), render_asan(family, frames, rng)))
    for _ in range(n_duplicates):
        crashes.append(rng.choice(crashes[:n_unique]))
    rng.shuffle(crashes)

    truth = {}
    types = {}
    for i, (family, trace, asan) in enumerate(crashes):
        crash_id = f"crash_{i:04d}"
        (out_dir / f"{crash_id}.trace").write_text(trace, encoding="utf-8")
        (out_dir / f"{crash_id}.asan").write_text(asan, encoding="utf-8")
        truth[crash_id] = family.label
        types[family.label] = family.bug_type

    with open(out_dir.parent / f"{out_dir.name}_truth.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label", "bug_type"])
        for crash_id, label in truth.items():
            writer.writerow([crash_id, label, types[label]])
    return truth


def main(argv: list[str] | None = None) -> None:
    parser = argparse.ArgumentParser(description="write a synthetic three-family crash corpus")
    parser.add_argument("out_dir")
    parser.add_argument("--unique", type=int, default=280)
    parser.add_argument("--duplicates", type=int, default=20)
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args(argv)
    truth = generate(args.out_dir, args.unique, args.duplicates, args.seed)
    print(f"wrote {len(truth)} crashes to {args.out_dir} (truth: {Path(args.out_dir).name}_truth.csv)")


if __name__ == "__main__":
    main()
