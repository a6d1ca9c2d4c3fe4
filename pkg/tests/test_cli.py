import json
import subprocess
import sys

import numpy as np
import pytest

from groupseg import io
from groupseg.cli import main, parse_grid, UsageError
from groupseg.core import LabelMap, LabelMergeTable, remap_labels
from groupseg.phantom import phantom_session


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    sess = phantom_session(seed=0, shape=(24, 24, 24), spacing=(6.0, 6.0, 6.0))
    io.write_volume(sess.label_map, d / "labels.nii.gz")
    io.write_volume(sess.images[0], d / "t2.nii.gz")
    (d / "sessions.json").write_text(json.dumps([{"labels": "labels.nii.gz", "images": ["t2.nii.gz"], "id": "p0"}]))
    (d / "empty.json").write_text("[]")
    return d


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    doc = json.loads(out.out) if code == 0 and out.out.strip() else None
    return code, doc, out.err


def test_help_documents_every_flag():
    proc = subprocess.run([sys.executable, "-m", "groupseg.cli", "synth", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for flag in ("--config", "--sessions", "--count", "--seed", "--out", "--jobs", "--grid"):
        assert flag in proc.stdout


def test_usage_errors_exit_one(capsys):
    assert main([]) == 1
    assert main(["synth"]) == 1
    assert main(["no-such-command"]) == 1
    capsys.readouterr()


def test_parse_grid():
    assert parse_grid("48@3").shape == (48, 48, 48) and parse_grid("48@3").spacing == (3.0, 3.0, 3.0)
    assert parse_grid("8x6x4").shape == (8, 6, 4)
    with pytest.raises(UsageError):
        parse_grid("big")


# -- synth -----------------------------------------------------------------------

def test_synth_single_sample(files, tmp_path, capsys):
    code, doc, _ = run(capsys, "synth", "--sessions", files / "sessions.json", "--count", 1, "--seed", 3,
                       "--out", tmp_path / "ds", "--jobs", 1, "--grid", "16@8")
    assert code == 0 and doc["count"] == 1
    sample = tmp_path / "ds" / "sample_000000"
    n = len(list(sample.glob("image_*.nii.gz")))
    assert 1 <= n <= 4
    assert (sample / "labels.nii.gz").exists() and (sample / "trace.json").exists()


def test_synth_seed_repeat_identical(files, tmp_path, capsys):
    for name in ("a", "b"):
        code, _, _ = run(capsys, "synth", "--sessions", files / "sessions.json", "--count", 2, "--seed", 5,
                         "--out", tmp_path / name, "--jobs", 1, "--grid", "16@8")
        assert code == 0
    for f in sorted((tmp_path / "a").rglob("*.*")):
        assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_synth_empty_sessions_exit_one(files, tmp_path, capsys):
    code, _, err = run(capsys, "synth", "--sessions", files / "empty.json", "--out", tmp_path / "x")
    assert code == 1 and "no sessions" in err


def test_synth_unreadable_sessions_exit_two(tmp_path, capsys):
    (tmp_path / "s.json").write_text(json.dumps([{"labels": "missing.nii.gz"}]))
    code, _, _ = run(capsys, "synth", "--sessions", tmp_path / "s.json", "--out", tmp_path / "x")
    assert code == 2


def test_defaults_file_supplies_flags(files, tmp_path, capsys):
    (tmp_path / "d.json").write_text(json.dumps({"synth": {"sessions": str(files / "sessions.json"), "count": 2,
                                                            "grid": "16@8", "jobs": 1, "seed": 1}}))
    code, doc, _ = run(capsys, "--defaults", tmp_path / "d.json", "synth", "--out", tmp_path / "ds", "--count", 1)
    assert code == 0 and doc["count"] == 1  # explicit flag wins
    (tmp_path / "bad.json").write_text(json.dumps({"synth": {"colour": 1}}))
    code, _, _ = run(capsys, "--defaults", tmp_path / "bad.json", "synth", "--out", tmp_path / "y")
    assert code == 1


# -- label utilities ---------------------------------------------------------------

def test_remap_identity_round_trip(files, tmp_path, capsys):
    lm = io.read_volume(files / "labels.nii.gz", as_labels=True)
    ids = sorted(int(i) for i in np.unique(lm.data))
    (tmp_path / "t.json").write_text(json.dumps({"map": {str(i): i for i in ids}}))
    code, doc, _ = run(capsys, "remap", "--in", files / "labels.nii.gz", "--table", tmp_path / "t.json", "--out", tmp_path / "o.nii.gz")
    assert code == 0 and doc["labels"] == ids
    assert np.array_equal(io.read_volume(tmp_path / "o.nii.gz", as_labels=True).data, lm.data)


def test_remap_unmapped_exit_two(files, tmp_path, capsys):
    (tmp_path / "t.json").write_text(json.dumps({"map": {"0": 0}}))
    code, _, err = run(capsys, "remap", "--in", files / "labels.nii.gz", "--table", tmp_path / "t.json", "--out", tmp_path / "o.nii.gz")
    assert code == 2 and "merge table" in err


def test_gmm_labels_default_k(files, tmp_path, capsys):
    brain = io.read_volume(files / "labels.nii.gz", as_labels=True).strip_transients()
    io.write_volume(brain, tmp_path / "brain.nii.gz")
    code, doc, _ = run(capsys, "gmm-labels", "--image", files / "t2.nii.gz", "--labels", tmp_path / "brain.nii.gz", "--out", tmp_path / "g.nii.gz")
    assert code == 0 and doc["components"] <= 6 and not doc["warnings"]
    out = io.read_volume(tmp_path / "g.nii.gz", as_labels=True)
    keep = brain.data > 0
    assert np.array_equal(out.data[keep], brain.data[keep])


def test_gmm_labels_reduces_k_with_warning(tmp_path, capsys):
    data = np.zeros((4, 4, 4), np.uint16)
    data[1:, :, :] = 2
    img = np.zeros((4, 4, 4), np.float32)
    img[0, 0, :3] = [0.1, 0.4, 0.9]
    io.write_volume(LabelMap(data, np.eye(4)), tmp_path / "l.nii")
    io.write_volume(io.Volume(img), tmp_path / "i.nii")
    code, doc, _ = run(capsys, "gmm-labels", "--image", tmp_path / "i.nii", "--labels", tmp_path / "l.nii", "--out", tmp_path / "o.nii")
    assert code == 0 and doc["components"] == 3 and doc["warnings"]


# -- training, inference and scoring -----------------------------------------------

def test_train_zero_steps_then_segment(files, tmp_path, capsys):
    code, doc, _ = run(capsys, "train-toy", "--sessions", files / "sessions.json", "--steps", 0, "--grid", "16@8",
                       "--levels", 2, "--features", 3, "--out-weights", tmp_path / "w.gsw", "--curve", tmp_path / "c.csv")
    assert code == 0 and doc["steps"] == 0
    from groupseg.net import GroupUNet, load_weights

    net, _ = load_weights(tmp_path / "w.gsw")
    fresh = GroupUNet(2, 3, 1, 22, seed=0)
    for (k, v), (_, v2) in zip(net.state_dict().items(), fresh.state_dict().items()):
        assert np.array_equal(v.numpy(), v2.numpy()), k
    assert (tmp_path / "c.csv").read_text().splitlines() == ["step,loss,val_dice"]

    t2 = files / "t2.nii.gz"
    code, doc, _ = run(capsys, "segment", "--weights", tmp_path / "w.gsw", t2, "--out", tmp_path / "one.nii.gz")
    assert code == 0 and doc["inputs"] == 1
    code, doc, _ = run(capsys, "segment", "--weights", tmp_path / "w.gsw", t2, t2, "--out", tmp_path / "two.nii.gz")
    assert code == 0 and doc["inputs"] == 2
    one = io.read_volume(tmp_path / "one.nii.gz", as_labels=True)
    two = io.read_volume(tmp_path / "two.nii.gz", as_labels=True)
    assert np.array_equal(one.data, two.data) and one.shape == (24, 24, 24)


def test_train_curve_rows_equal_steps(files, tmp_path, capsys):
    code, _, _ = run(capsys, "train-toy", "--sessions", files / "sessions.json", "--steps", 3, "--grid", "16@8",
                     "--levels", 2, "--features", 3, "--out-weights", tmp_path / "w.gsw", "--curve", tmp_path / "c.csv")
    assert code == 0
    assert len((tmp_path / "c.csv").read_text().splitlines()) == 1 + 3


def test_dice_self_is_one(files, capsys):
    code, doc, _ = run(capsys, "dice", "--pred", files / "labels.nii.gz", "--truth", files / "labels.nii.gz")
    assert code == 0 and doc["mean"] == 1.0 and all(v == 1.0 for v in doc["per_label"].values())


def test_dice_merge_matches_manual_premerge(tmp_path, capsys):
    rng = np.random.default_rng(0)
    ids = [0, 2, 3, 7, 8, 41, 42, 46, 47]
    a = rng.choice(ids, size=(6, 6, 6)).astype(np.uint16)
    b = rng.choice(ids, size=(6, 6, 6)).astype(np.uint16)
    io.write_volume(LabelMap(a), tmp_path / "a.nii")
    io.write_volume(LabelMap(b), tmp_path / "b.nii")
    code, doc, _ = run(capsys, "dice", "--pred", tmp_path / "a.nii", "--truth", tmp_path / "b.nii", "--merge", "eval")
    assert code == 0
    table = LabelMergeTable.evaluation_merge().mapping
    ma = np.vectorize(lambda v: table[int(v)])(a)
    mb = np.vectorize(lambda v: table[int(v)])(b)
    for label, score in doc["per_label"].items():
        k = int(label)
        inter = sum(1 for x, y in zip(ma.ravel(), mb.ravel()) if x == k and y == k)
        tally = sum(1 for x in ma.ravel() if x == k) + sum(1 for y in mb.ravel() if y == k)
        assert score == pytest.approx(2 * inter / tally)
    assert "7" not in doc["per_label"] and "46" not in doc["per_label"]


def test_dice_explicit_labels(files, capsys):
    code, doc, _ = run(capsys, "dice", "--pred", files / "labels.nii.gz", "--truth", files / "labels.nii.gz", "--labels", "2,41")
    assert code == 0 and set(doc["per_label"]) == {"2", "41"}


# -- inspect ------------------------------------------------------------------------

def test_inspect_empty_manifest(tmp_path, capsys):
    (tmp_path / "manifest.jsonl").write_text("")
    code, doc, _ = run(capsys, "inspect", "--manifest", tmp_path / "manifest.jsonl")
    assert code == 0 and doc == {"samples": 0, "rows": {}}


def test_inspect_corrupted_trace(tmp_path, capsys):
    (tmp_path / "trace.json").write_text("{\"spatial\": [1, 2")
    code, _, _ = run(capsys, "inspect", "--trace", tmp_path / "trace.json")
    assert code == 2


def test_inspect_dataset_within_bounds(files, tmp_path, capsys):
    run(capsys, "synth", "--sessions", files / "sessions.json", "--count", 4, "--seed", 2, "--out", tmp_path / "ds",
        "--jobs", 1, "--grid", "16@8")
    code, doc, _ = run(capsys, "inspect", "--manifest", tmp_path / "ds" / "manifest.jsonl")
    assert code == 0 and doc["samples"] == 4
    for name, row in doc["rows"].items():
        if row["count"]:
            assert row["in_bounds"], name


def test_internal_error_exit_three(monkeypatch, capsys, files):
    import groupseg.cli as cli

    def boom(args):
        raise RuntimeError("boom")

    monkeypatch.setattr(cli, "cmd_dice", boom)
    code = cli.main(["dice", "--pred", str(files / "labels.nii.gz"), "--truth", str(files / "labels.nii.gz")])
    err = capsys.readouterr().err
    assert code == 3 and "internal error" in err


def test_remap_cli_matches_library(files, tmp_path, capsys):
    table = LabelMergeTable.evaluation_merge()
    brain = io.read_volume(files / "labels.nii.gz", as_labels=True).strip_transients()
    io.write_volume(LabelMap(brain.data, brain.affine), tmp_path / "b.nii.gz")
    (tmp_path / "t.json").write_text(json.dumps(table.to_dict()))
    code, _, _ = run(capsys, "remap", "--in", tmp_path / "b.nii.gz", "--table", tmp_path / "t.json", "--out", tmp_path / "o.nii.gz")
    assert code == 0
    expected = remap_labels(LabelMap(brain.data, brain.affine), table)
    assert np.array_equal(io.read_volume(tmp_path / "o.nii.gz", as_labels=True).data, expected.data)
