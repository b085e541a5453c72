"""End-to-end tests through ``dlct.cli.main``."""
import json

import numpy as np
import pytest

from dlct import checkpoint as ckpt
from dlct.cli import RunConfig, UsageError, color_alignment, main
from dlct.data import read_dataset
from dlct.model import DLCT, ModelConfig
from dlct.numerics import load_tensor
from dlct.training import overfit_batch


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, [json.loads(x) for x in out.splitlines() if x.strip()], err


def error_of(err):
    lines = err.strip().splitlines()
    assert len(lines) == 1, err
    return json.loads(lines[0])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A small corpus plus an XE-trained model, shared by the slower tests."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--n", "600", "--seed", "1", "--out", str(root / "data")]) == 0
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "run"),
                 "--phase", "xe", "--xe-epochs", "10", "--seed", "0"]) == 0
    return root


def test_gen_data_layout_and_determinism(tmp_path, capsys):
    code, recs, _ = run(capsys, "gen-data", "--n", 40, "--seed", 7, "--out", tmp_path / "a")
    assert code == 0 and recs[0]["counts"] == {"train": 36, "val": 2, "test": 2}
    run(capsys, "gen-data", "--n", 40, "--seed", 7, "--out", tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == ["manifest.json", "test.bin", "train.bin", "val.bin"]
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_gen_data_grid_flag(tmp_path, capsys):
    code, recs, _ = run(capsys, "gen-data", "--n", 20, "--grid", "7x7", "--out", tmp_path)
    assert code == 0 and recs[0]["grid"] == "7x7"
    assert json.loads((tmp_path / "manifest.json").read_text())["grid"] == "7x7"
    assert read_dataset(tmp_path).splits["train"][0].bundle.grid_feats.shape[0] == 49


@pytest.mark.parametrize("flag,variant,cra", [
    ("no-lcca", "no_lcca", "full"), ("cbg", "cbg", "full"), ("grid-only", "grid_only", "full"),
    ("region-only", "region_only", "full"), ("concat-baseline", "concat", "full"),
    ("no-cra", "dlct", "none"), ("pe-only", "dlct", "pe_only"),
])
def test_ablation_flags_select_variant(flag, variant, cra):
    cfg = RunConfig(ablate=[flag]).validate().model_config()
    assert (cfg.variant, cfg.cra) == (variant, cra)


def test_conflicting_ablations_rejected(tmp_path, capsys):
    with pytest.raises(UsageError):
        RunConfig(ablate=["grid-only", "cbg"]).validate()
    assert RunConfig(ablate=["cbg", "pe-only"]).validate().model_config().cra == "pe_only"
    code, _, err = run(capsys, "train", "--data", tmp_path, "--out", tmp_path / "r",
                       "--ablate", "grid-only", "--ablate", "cbg")
    assert code == 2 and error_of(err)["error"] == "usage"


def test_train_writes_manifest_and_logs(tmp_path, capsys):
    run(capsys, "gen-data", "--n", 20, "--out", tmp_path / "d")
    code, recs, _ = run(capsys, "train", "--data", tmp_path / "d", "--out", tmp_path / "r",
                        "--xe-epochs", 1, "--scst-epochs", 1, "--ablate", "no-lcca")
    assert code == 0 and [r["phase"] for r in recs] == ["xe", "scst"]
    rc = json.loads((tmp_path / "r" / "run.json").read_text())
    assert rc["ablate"] == ["no-lcca"] and rc["train"]["xe_epochs"] == 1
    manifest = ckpt.read_manifest(tmp_path / "r" / "checkpoints" / "scst-epoch000")
    assert manifest["model_config"]["variant"] == "no_lcca"
    assert manifest["train_config"]["betas"] == [0.9, 0.98]
    # an existing run is never overwritten silently
    code, _, err = run(capsys, "train", "--data", tmp_path / "d", "--out", tmp_path / "r")
    assert code == 2 and "resume" in error_of(err)["message"]


def test_config_file_replays_run(tmp_path, capsys):
    run(capsys, "gen-data", "--n", 20, "--out", tmp_path / "d")
    run(capsys, "train", "--data", tmp_path / "d", "--out", tmp_path / "r1", "--xe-epochs", 1, "--phase", "xe")
    rc = json.loads((tmp_path / "r1" / "run.json").read_text())
    rc["out"] = str(tmp_path / "r2")
    (tmp_path / "replay.json").write_text(json.dumps(rc))
    assert run(capsys, "train", "--config", tmp_path / "replay.json")[0] == 0
    assert (tmp_path / "r1" / "metrics.jsonl").read_bytes() == (tmp_path / "r2" / "metrics.jsonl").read_bytes()


def test_interrupted_run_resumes(tmp_path, capsys):
    run(capsys, "gen-data", "--n", 20, "--out", tmp_path / "d")
    args = ["train", "--data", tmp_path / "d", "--phase", "xe", "--xe-epochs", 2]
    run(capsys, *args, "--out", tmp_path / "full")
    run(capsys, *args, "--out", tmp_path / "cut")
    cut = tmp_path / "cut"
    (cut / "checkpoints" / "LATEST").write_text("xe-epoch000\n")
    lines = (cut / "metrics.jsonl").read_text().splitlines(keepends=True)
    (cut / "metrics.jsonl").write_text(lines[0])
    assert run(capsys, "train", "--resume", cut)[0] == 0
    assert (cut / "metrics.jsonl").read_bytes() == (tmp_path / "full" / "metrics.jsonl").read_bytes()


def test_missing_dataset_is_one_line_error(tmp_path, capsys):
    code, out, err = run(capsys, "train", "--data", tmp_path / "nope", "--out", tmp_path / "r")
    assert code == 3 and out == [] and error_of(err)["error"] == "data"


def test_bad_flag_is_one_line_error(capsys):
    code, _, err = run(capsys, "eval", "--beam", "five")
    assert code == 2 and error_of(err)["error"] == "usage"


def test_score_command(tmp_path, capsys):
    (tmp_path / "c.txt").write_text("a red circle\na blue square\n")
    (tmp_path / "r.txt").write_text("a red circle\ta red disk\na green triangle\n")
    code, recs, _ = run(capsys, "score", tmp_path / "c.txt", tmp_path / "r.txt")
    assert code == 0 and [r.get("line") for r in recs[:2]] == [1, 2]
    assert recs[0]["cider_d"] > recs[1]["cider_d"] and recs[1]["cider_d"] < 1.0
    assert recs[-1]["n"] == 2
    (tmp_path / "r1.txt").write_text("a red circle\n")
    code, _, err = run(capsys, "score", tmp_path / "c.txt", tmp_path / "r1.txt")
    assert code == 2 and "lines" in error_of(err)["message"]


def test_human_output(tmp_path, capsys):
    main(["gen-data", "--n", "20", "--out", str(tmp_path), "--human"])
    out = capsys.readouterr().out
    assert "vocab_size=" in out and not out.startswith("{")


def test_eval_beam_monotone_and_deterministic(workspace, capsys):
    base = ["eval", "--ckpt", workspace / "run", "--data", workspace / "data", "--split", "val"]
    _, one, _ = run(capsys, *base, "--beam", 1)
    _, five, _ = run(capsys, *base, "--beam", 5)
    _, again, _ = run(capsys, *base, "--beam", 5)
    assert five[0]["log_prob"] >= one[0]["log_prob"]
    assert five == again


def test_eval_writes_outputs(workspace, tmp_path, capsys):
    run(capsys, "eval", "--ckpt", workspace / "run", "--data", workspace / "data", "--out", tmp_path)
    caps = (tmp_path / "captions-test.txt").read_text().splitlines()
    assert len(caps) == 30 and all(c.startswith("a ") for c in caps)
    assert json.loads((tmp_path / "eval.jsonl").read_text())["split"] == "test"


def test_eval_rejects_other_dataset(workspace, tmp_path, capsys):
    run(capsys, "gen-data", "--n", 20, "--seed", 3, "--grid", "3x3", "--out", tmp_path)
    code, _, err = run(capsys, "eval", "--ckpt", workspace / "run", "--data", tmp_path)
    assert code == 2 and "different dataset" in error_of(err)["message"]


def test_overfit_model_scores_above_nine_on_train(workspace, tmp_path, capsys):
    ds = read_dataset(workspace / "data")
    model = DLCT(ModelConfig.desk(vocab_size=len(ds.vocab)))
    overfit_batch(model, ds.splits["train"][:10], max_steps=500, target=0.01)
    ckpt.save_checkpoint(tmp_path / "ovf", model, data_hash=ds.fingerprint())
    _, recs, _ = run(capsys, "eval", "--ckpt", tmp_path / "ovf", "--data", workspace / "data",
                     "--split", "train", "--limit", 10)
    assert recs[0]["cider_d"] > 9.0


def test_dump_attention(workspace, tmp_path, capsys):
    code, recs, _ = run(capsys, "dump-attention", "--ckpt", workspace / "run", "--data", workspace / "data",
                        "--example", 3, "--out", tmp_path)
    assert code == 0
    index = json.loads((tmp_path / "index.json").read_text())
    dec = load_tensor(tmp_path / "dec_cross.dlt")
    assert dec.shape[0] == len(index["words"])
    np.testing.assert_allclose(dec.sum(axis=1), 1.0, atol=1e-6)
    regions, grids = load_tensor(tmp_path / "dec_regions.dlt"), load_tensor(tmp_path / "dec_grids.dlt")
    np.testing.assert_allclose(regions.sum(1) + grids.sum(1), 1.0, atol=1e-6)
    top3 = (tmp_path / "top3.txt").read_text().splitlines()
    assert len(top3) == len(index["words"])

    from dlct.model import collate
    ds = read_dataset(workspace / "data")
    batch = collate([ds.splits["test"][3].bundle], ckpt.load_model(workspace / "run" / "checkpoints" / "xe-epoch009").cfg)
    lcca = [n for n in index["tensors"] if n.startswith("lcca")]
    assert lcca
    for name in lcca:
        w = load_tensor(tmp_path / f"{name}.dlt")
        graph = batch.graph_rg[0] if name.startswith("lcca_r2g") else batch.graph_rg[0].T
        assert np.all(w[:, ~graph] == 0.0)
        # nodes without neighbours attend nowhere
        np.testing.assert_allclose(w.sum(-1), np.broadcast_to(graph.any(-1), w.shape[:2]), atol=1e-6)


def test_dump_attention_bad_example(workspace, tmp_path, capsys):
    code, _, err = run(capsys, "dump-attention", "--ckpt", workspace / "run", "--data", workspace / "data",
                       "--example", 999, "--out", tmp_path)
    assert code == 2 and "out of range" in error_of(err)["message"]


def test_color_words_attend_to_matching_regions(workspace):
    ds = read_dataset(workspace / "data")
    model = ckpt.load_model(workspace / "run" / "checkpoints" / "xe-epoch009")
    probe = (ds.splits["val"] + ds.splits["test"])[:50]
    hits, trials = color_alignment(model, probe, ds.vocab)
    assert trials >= 25 and hits > trials / 2
