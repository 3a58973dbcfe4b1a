from __future__ import annotations

import csv
import json
import subprocess
import sys

import numpy as np
import pytest
from filelock import FileLock

from crashbucket.cli import LOCK_NAME, main
from crashbucket.pipeline import RunConfig, cmd_embed, cmd_prepare
from crashbucket.preprocess import SourceConfig

from test_ingest import ASAN_SAMPLE

TRACE_A = "#0  0x1 in crash (p=0x7) at c.c:3\n#1  0x2 in main () at m.c:1\n"
TRACE_B = "#0  0x9 in other (q=1) at o.c:8\n#1  0x2 in main () at m.c:1\n"


def make_corpus(root, files):
    root.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (root / name).write_text(text, encoding="utf-8")
    return root


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture
def small(tmp_path):
    corpus = make_corpus(
        tmp_path / "corpus",
        {
            "a.trace": TRACE_A,
            "a.asan": ASAN_SAMPLE,
            "b.trace": TRACE_A.replace("0x1 in", "0x5 in"),  # same after cleaning
            "b.asan": ASAN_SAMPLE,
            "c.trace": TRACE_B,
        },
    )
    return corpus, tmp_path / "out"


def test_prepare_counts_and_files(small, monkeypatch):
    corpus, out = small
    monkeypatch.delenv("DEDUP_CACHE", raising=False)
    assert main(["prepare", "--corpus", str(corpus), "-o", str(out)]) == 0
    prepared = (out / "prepared.jsonl").read_text().splitlines()
    assert [json.loads(line)["id"] for line in prepared] == ["a", "c"]
    assert read_csv(out / "duplicates.csv") == [["id", "representative"], ["a", "a"], ["b", "a"], ["c", "c"]]
    run = json.loads((out / "run.json").read_text())
    assert run["prepare"]["total"] == 3 and run["prepare"]["duplicate_classes"] == 1
    assert {"config_hash", "versions"} <= set(run) and "corpus_hash" in run["prepare"]


def test_asan_only_lists_unpreparable(small):
    corpus, out = small
    assert main(["prepare", "--corpus", str(corpus), "-o", str(out), "--sources", "asan"]) == 0
    run = json.loads((out / "run.json").read_text())
    assert [u["id"] for u in run["prepare"]["unpreparable"]] == ["c"]


def test_corpus_error_names_file(tmp_path, capsys):
    corpus = make_corpus(tmp_path / "c", {"x.asan": "r\n"})
    assert main(["prepare", "--corpus", str(corpus), "-o", str(tmp_path / "o")]) == 1
    assert "x" in capsys.readouterr().err


def test_full_run_outputs_and_determinism(small):
    corpus, out = small
    args = ["run", "--corpus", str(corpus), "-o", str(out)]
    assert main(args) == 0
    names = ["prepared.jsonl", "duplicates.csv", "vectors.jsonl", "clusters.csv", "selection.json"]
    first = {n: (out / n).read_bytes() for n in names}
    assert main(args) == 0
    assert {n: (out / n).read_bytes() for n in names} == first
    run = json.loads((out / "run.json").read_text())
    assert run["embed"]["provider_calls"] == 0 and run["embed"]["cache_hits"] == run["embed"]["texts"]

    rows = read_csv(out / "clusters.csv")
    assert [r[0] for r in rows[1:]] == ["a", "b", "c"]
    cluster = dict(rows[1:])
    assert cluster["a"] == cluster["b"]
    selection = json.loads((out / "selection.json").read_text())
    assert {"epsilon", "dbcv", "persistence", "effective_count", "candidates_considered"} <= set(selection)

    for line in (out / "vectors.jsonl").read_text().splitlines():
        row = json.loads(line)
        assert row["dim"] == 64 and abs(np.linalg.norm(row["values"]) - 1) <= 1e-9


def test_missing_source_combines_present_ones(small):
    corpus, out = small
    cfg = RunConfig(out_dir=out, corpus=corpus)
    cmd_prepare(cfg)
    cmd_embed(cfg)
    from crashbucket.embed import combine_sources, offline_embed, truncate_normalize
    from crashbucket.pipeline import read_prepared

    rec = {r.id: r for r in read_prepared(out)}["c"]
    assert len(rec.texts) == 2
    expected = combine_sources({k: truncate_normalize(offline_embed(t, 64), 64) for k, t in rec.texts.items()})
    row = [json.loads(line) for line in (out / "vectors.jsonl").read_text().splitlines() if '"c"' in line][0]
    assert np.allclose(row["values"], expected.values, atol=1e-15)


def test_single_representative_is_cluster_zero(tmp_path):
    corpus = make_corpus(tmp_path / "c", {"a.trace": TRACE_A, "b.trace": TRACE_A})
    out = tmp_path / "o"
    assert main(["run", "--corpus", str(corpus), "-o", str(out)]) == 0
    assert read_csv(out / "clusters.csv") == [["id", "cluster"], ["a", "0"], ["b", "0"]]


def test_unpreparable_ids_still_covered(small):
    corpus, out = small
    assert main(["run", "--corpus", str(corpus), "-o", str(out), "--sources", "asan"]) == 0
    cluster = dict(read_csv(out / "clusters.csv")[1:])
    assert sorted(cluster) == ["a", "b", "c"] and cluster["c"] == "unpreparable-c"


def test_noise_rows_get_unique_ids(tmp_path):
    files = {}
    for k in range(6):
        files[f"p{k}.trace"] = f"#0 png_read (x={k}) at png.c:1\n#1 main () at m.c:1\n"
    files["z.trace"] = "#0 zzz_totally_unrelated_frame (qq=9) at other/zzz.c:77\n"
    corpus = make_corpus(tmp_path / "c", files)
    out = tmp_path / "o"
    assert main(["run", "--corpus", str(corpus), "-o", str(out), "--sources", "full"]) == 0
    values = [r[1] for r in read_csv(out / "clusters.csv")[1:]]
    noise = [v for v in values if v.startswith("noise-")]
    assert noise and len(noise) == len(set(noise))
    assert all(v.isdigit() or v.startswith("noise-") for v in values)


def test_evaluate_perfect_and_without_types(small):
    corpus, out = small
    truth = corpus.parent / "truth.csv"
    truth.write_text("id,label\na,A\nb,A\nc,C\n")
    assert main(["run", "--corpus", str(corpus), "-o", str(out), "--truth", str(truth)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert "per_type" not in report
    text = (out / "report.txt").read_text()
    # two representatives: either split (perfect) or merged; both reports must be well-formed
    assert "Purity" in text and "%" in text


def test_evaluate_requires_truth(small, capsys):
    corpus, out = small
    main(["run", "--corpus", str(corpus), "-o", str(out)])
    assert main(["evaluate", "-o", str(out)]) == 1
    assert "ground-truth" in capsys.readouterr().err


def test_embed_failure_lists_unresolved_ids(small, capsys):
    corpus, out = small
    main(["prepare", "--corpus", str(corpus), "-o", str(out)])
    code = main(["embed", "-o", str(out), "--provider", "remote", "--endpoint", "http://127.0.0.1:9", "--model", "m"])
    assert code == 1
    err = capsys.readouterr().err
    assert "unresolved ids: a, c" in err


def test_cluster_without_vectors_fails(tmp_path, capsys):
    assert main(["cluster", "-o", str(tmp_path / "o")]) == 1
    assert "vectors.jsonl" in capsys.readouterr().err


def test_locked_output_directory(small, capsys):
    corpus, out = small
    out.mkdir(parents=True)
    with FileLock(str(out / LOCK_NAME)):
        assert main(["prepare", "--corpus", str(corpus), "-o", str(out)]) == 3
    assert "in use" in capsys.readouterr().err


def test_bad_flags_exit_with_usage(small):
    corpus, out = small
    with pytest.raises(SystemExit):
        main(["prepare", "--corpus", str(corpus), "-o", str(out), "--sources", "nope"])
    with pytest.raises(SystemExit):
        main(["prepare", "--corpus", str(corpus), "-o", str(out), "--api-key", "x"])


def test_sources_ablation_changes_prepared_fields(small):
    corpus, out = small
    main(["prepare", "--corpus", str(corpus), "-o", str(out), "--sources", "full,coarse"])
    row = json.loads((out / "prepared.jsonl").read_text().splitlines()[0])
    assert set(row) == {"id", "full_trace", "coarse_trace", "hashes"}


def test_cache_env_override(small, monkeypatch, tmp_path):
    corpus, out = small
    cache = tmp_path / "shared" / "cache.jsonl"
    monkeypatch.setenv("DEDUP_CACHE", str(cache))
    main(["run", "--corpus", str(corpus), "-o", str(out)])
    assert cache.exists() and not (out / "embedding_cache.jsonl").exists()


def test_module_entry_point(small):
    corpus, out = small
    proc = subprocess.run(
        [sys.executable, "-m", "crashbucket", "prepare", "--corpus", str(corpus), "-o", str(out)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert "3 crashes" in proc.stderr


def test_dump_tree(small):
    corpus, out = small
    main(["run", "--corpus", str(corpus), "-o", str(out), "--dump-tree"])
    assert (out / "condensed_tree.jsonl").exists()
