import json
import re
import time
from pathlib import Path

import numpy as np
import pytest

from lilac import cli
from lilac.checkpoint import Checkpoint, file_digest
from lilac.datamodel import FlowSequence, dataset_digest, load_split, validate

SNAPSHOTS = Path(__file__).parent / "snapshots"
SMALL = {"d_model": 16, "d_txt": 16, "n_heads": 2, "enc_layers": 1, "dec_layers": 1}


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def write_config(path, **sections):
    path.write_text(json.dumps(sections))
    return path


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "ds"
    assert cli.main(["--seed", "7", "gen-data", "--out", str(out), "--episodes", "20"]) == 0
    return out


@pytest.fixture(scope="module")
def small_config(tmp_path_factory):
    return write_config(tmp_path_factory.mktemp("cfg") / "small.json",
                        train={"model": SMALL, "batch_size": 4, "lr": 1e-3})


@pytest.fixture(scope="module")
def flow_ckpt(dataset, small_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["--config", str(small_config), "train", "--data", str(dataset),
                     "--out", str(out), "--steps", "3"]) == 0
    return out / "flow.ckpt"


# -- gen-data -------------------------------------------------------------------------------
def test_gen_data_rejects_zero_episodes(capsys, tmp_path):
    code, _, err = run(capsys, "gen-data", "--out", tmp_path / "x", "--episodes", 0)
    assert code == cli.EXIT_ARGS and "--episodes" in err


def test_gen_data_is_reproducible(capsys, tmp_path):
    digests = []
    for name in ("a", "b"):
        code, out, _ = run(capsys, "--seed", 7, "gen-data", "--out", tmp_path / name, "--episodes", 12)
        assert code == 0
        digests.append(re.search(r"digest: (\w+)", out).group(1))
    assert digests[0] == digests[1] == dataset_digest(tmp_path / "a")
    assert dataset_digest(tmp_path / "a") == dataset_digest(tmp_path / "b")


def test_gen_data_splits_validate(capsys, dataset):
    for split in ("train", "val", "test"):
        for e in load_split(dataset, split):
            assert validate(e) == []
    assert json.loads((dataset / "run_config.json").read_text())["data"]["seed"] == 7


def test_unknown_config_section(capsys, tmp_path):
    cfg = write_config(tmp_path / "c.json", optimizer={})
    code, _, err = run(capsys, "--config", cfg, "gen-data", "--out", tmp_path / "x")
    assert code == cli.EXIT_ARGS and "optimizer" in err


# -- train --------------------------------------------------------------------------------
def test_train_missing_dataset(capsys, tmp_path):
    missing = tmp_path / "nowhere"
    code, _, err = run(capsys, "train", "--data", missing, "--out", tmp_path / "o")
    assert code == cli.EXIT_IO and str(missing) in err


def test_train_records_ablation(capsys, dataset, small_config, tmp_path):
    code, out, _ = run(capsys, "--config", small_config, "train", "--data", dataset, "--out", tmp_path,
                       "--steps", 2, "--ablate", "no-srl")
    assert code == 0 and "sha256=" in out
    meta = Checkpoint.load(tmp_path / "flow.ckpt").meta
    assert meta["ablations"] == {"no_srl": True, "no_vp": False}
    log = [json.loads(line) for line in (tmp_path / "flow_train_log.jsonl").read_text().splitlines()]
    assert len(log) == 2 and all("l_sem" not in e for e in log)


def test_train_non_finite_loss(capsys, dataset, tmp_path):
    cfg = write_config(tmp_path / "c.json", train={"model": SMALL, "lr": 1e200, "grad_clip": 0.0})
    code, _, err = run(capsys, "--config", cfg, "train", "--data", dataset, "--out", tmp_path / "o",
                       "--steps", 20)
    assert code == cli.EXIT_TRAIN
    assert "flow_last_good.ckpt" in err and (tmp_path / "o" / "flow_last_good.ckpt").is_file()


def test_train_is_bit_reproducible_and_leaves_data_alone(capsys, dataset, small_config, tmp_path):
    before = dataset_digest(dataset)
    for name in ("a", "b"):
        assert run(capsys, "--config", small_config, "train", "--data", dataset,
                   "--out", tmp_path / name, "--steps", 3)[0] == 0
    assert file_digest(tmp_path / "a" / "flow.ckpt") == file_digest(tmp_path / "b" / "flow.ckpt")
    assert dataset_digest(dataset) == before


def test_train_refiner_stage(capsys, dataset, small_config, flow_ckpt, tmp_path):
    cfg = write_config(tmp_path / "c.json", train={"model": {"d_model": 16, "d_txt": 16, "n_heads": 2,
                                                               "n_layers": 1}})
    code, out, _ = run(capsys, "--config", cfg, "train", "--data", dataset, "--out", tmp_path,
                       "--stage", "refiner", "--steps", 2, "--flow-source", "predicted",
                       "--flow-checkpoint", flow_ckpt)
    assert code == 0 and "stage=refiner" in out
    assert Checkpoint.load(tmp_path / "refiner.ckpt").meta["flow_source"] == "predicted"


def test_smoke_run_time(capsys, dataset, tmp_path):
    # Default model, 200 steps: measured at about 50 s on one idle core; 2x slack.
    start = time.perf_counter()
    code, _, _ = run(capsys, "train", "--data", dataset, "--out", tmp_path, "--steps", 200)
    elapsed = time.perf_counter() - start
    assert code == 0
    assert elapsed < 100, f"smoke run took {elapsed:.1f} s"


# -- eval ---------------------------------------------------------------------------------
def test_eval_oracle(capsys, dataset, tmp_path):
    code, out, _ = run(capsys, "eval", "--data", dataset, "--split", "train", "--oracle",
                       "--report", tmp_path / "r.json")
    assert code == 0
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["aggregate"]["ade"] == 0.0 and report["aggregate"]["auc"] == 1.0
    assert report["config"]["displacement_threshold"] == 2.0 and "auc_definition" in report["config"]
    assert "oracle" in out


def test_eval_requires_one_source(capsys, dataset, tmp_path):
    code, _, _ = run(capsys, "eval", "--data", dataset, "--oracle", "--baseline", "static",
                     "--report", tmp_path / "r.json")
    assert code == cli.EXIT_ARGS


def test_eval_ablation_mismatch(capsys, dataset, flow_ckpt, tmp_path):
    args = ("eval", "--data", dataset, "--split", "train", "--checkpoint", flow_ckpt,
            "--report", tmp_path / "r.json", "--ablate", "no-vp")
    code, _, err = run(capsys, *args)
    assert code == cli.EXIT_FLAGS and "--force" in err
    assert run(capsys, *args, "--force")[0] == 0


def test_eval_report_is_reproducible(capsys, dataset, flow_ckpt, tmp_path):
    for name in ("a", "b"):
        assert run(capsys, "eval", "--data", dataset, "--split", "train", "--checkpoint", flow_ckpt,
                   "--report", tmp_path / name / "r.json")[0] == 0
    assert (tmp_path / "a" / "r.json").read_bytes() == (tmp_path / "b" / "r.json").read_bytes()


# -- infer --------------------------------------------------------------------------------
def first_episode(dataset):
    return sorted((dataset / "test").glob("*.lflw"))[0]


def test_infer_outputs_revalidate(capsys, dataset, flow_ckpt, tmp_path):
    code, _, _ = run(capsys, "infer", "--checkpoint", flow_ckpt, "--episode", first_episode(dataset),
                     "--out", tmp_path)
    assert code == 0
    doc = json.loads((tmp_path / "flow.json").read_text())
    flow = FlowSequence(np.array(doc["coords"]))
    assert flow.horizon == doc["horizon"] and flow.n_points == doc["n_points"]
    assert flow.coords.min() >= 0 and flow.coords[..., 0].max() <= 127 and flow.coords[..., 1].max() <= 127
    traj = json.loads((tmp_path / "trajectory.json").read_text())
    assert len(traj) == flow.horizon
    assert (tmp_path / "overlay.png").is_file()


def test_infer_dead_endpoint(capsys, dataset, flow_ckpt, tmp_path):
    import socket

    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    code, _, err = run(capsys, "infer", "--checkpoint", flow_ckpt, "--episode", first_episode(dataset),
                       "--prompt-source", "remote", "--endpoint", f"http://127.0.0.1:{port}/prompt",
                       "--timeout", 0.5, "--out", tmp_path)
    assert code == cli.EXIT_PROMPTER
    assert "remote" in err and "PromptTimeout" in err


def test_infer_missing_checkpoint(capsys, dataset, tmp_path):
    code, _, err = run(capsys, "infer", "--checkpoint", tmp_path / "none.ckpt",
                       "--episode", first_episode(dataset), "--out", tmp_path)
    assert code == cli.EXIT_IO and "none.ckpt" in err


def test_infer_on_overfit_model_tracks_ground_truth(capsys, tmp_path):
    from lilac import synthbench as sb
    from lilac.datamodel import save_episode
    from lilac.detokenizer import trajectory_loss
    from lilac.training import TrainConfig, train_flow

    spec = sb.sample_scene_spec(3)
    e = sb.generate_episode(spec, "ep00003")
    save_episode(e, tmp_path / "ep.lflw")
    cfg = TrainConfig(seed=0, lr=3e-3, batch_size=1, max_steps=150, model=SMALL)
    res = train_flow([e], cfg, tmp_path / "model")
    code, _, _ = run(capsys, "infer", "--checkpoint", res.checkpoint_path, "--episode", tmp_path / "ep.lflw",
                     "--out", tmp_path / "out")
    assert code == 0
    flow = np.array(json.loads((tmp_path / "out" / "flow.json").read_text())["coords"])
    assert np.abs(flow - e.gt_flow.coords).max() <= 0.5
    from lilac.detokenizer import coarse_trajectory

    poses = coarse_trajectory(FlowSequence(flow), e.depth, e.camera).poses
    assert trajectory_loss(poses, e.gt_trajectory) < 0.01


# -- gradcheck ----------------------------------------------------------------------------
def test_gradcheck_passes_and_is_deterministic(capsys):
    code, first, _ = run(capsys, "gradcheck")
    assert code == 0 and "worst relative error" in first
    assert run(capsys, "gradcheck")[1] == first


def test_gradcheck_catches_sign_flip(capsys, monkeypatch):
    from lilac.numerics import tensor

    real = tensor._make

    def flipped(data, parents, backward, op):
        if op == "matmul":
            inner = backward
            backward = lambda g: tuple(-x for x in inner(g))  # noqa: E731
        return real(data, parents, backward, op)

    monkeypatch.setattr(tensor, "_make", flipped)
    code, _, err = run(capsys, "gradcheck")
    assert code == cli.EXIT_GRADCHECK and "numerics" in err


# -- help ---------------------------------------------------------------------------------
@pytest.mark.parametrize("command", ["", "gen-data", "train", "eval", "infer", "gradcheck"])
def test_help_snapshot(capsys, monkeypatch, command):
    monkeypatch.setenv("COLUMNS", "100")
    argv = [command, "--help"] if command else ["--help"]
    code, out, _ = run(capsys, *argv)
    assert code == 0
    assert out == (SNAPSHOTS / f"help_{command or 'main'}.txt").read_text()
