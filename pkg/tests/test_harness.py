import json
import logging

import numpy as np
import pytest

from poseaug.errors import (CameraError, ConfigError, DatasetError, DepthError, JointCountError,
                            NonFiniteRecordError)
from poseaug.harness import (PoseDataset, PoseRecord, SyntheticConfig, generate_synthetic, load_dataset,
                             save_dataset)
from poseaug.harness.cli import main
from poseaug.harness.synthetic import TEMPLATE_LENGTHS, bone_lengths_of
from poseaug.skeleton import decompose, hierarchical_transform, part_kcs, project

CAM = [1145.0, 1145.0, 500.0, 500.0]


def write_lines(path, header, records):
    with open(path, "w") as fh:
        for obj in ([header] if header else []) + records:
            fh.write((obj if isinstance(obj, str) else json.dumps(obj)) + "\n")


def header(topo):
    return {"format": "poseaug-poses", "version": 1, "units": "mm", "topology_hash": topo.digest(),
            "joint_count": 16}


def record(pose):
    return {"pose3d": np.asarray(pose).tolist(), "camera": CAM}


# -- dataset files ------------------------------------------------------------------------

def test_round_trip_is_bit_exact(small_pools, tmp_path):
    ds = small_pools["source"]
    save_dataset(tmp_path / "s.jsonl", ds)
    again = load_dataset(tmp_path / "s.jsonl")
    for name in ("pose3d", "pose2d", "cams"):
        np.testing.assert_array_equal(getattr(again, name), getattr(ds, name))
    assert again.subjects == ds.subjects and again.extras == ds.extras


def test_empty_file_warns(tmp_path, caplog):
    (tmp_path / "e.jsonl").write_text("")
    with caplog.at_level(logging.WARNING):
        ds = load_dataset(tmp_path / "e.jsonl")
    assert len(ds) == 0 and "empty" in caplog.text


def test_missing_pose2d_is_projected(topo, small_pools, tmp_path):
    pose = small_pools["source"].pose3d[0]
    write_lines(tmp_path / "a.jsonl", header(topo), [record(pose)])
    ds = load_dataset(tmp_path / "a.jsonl")
    np.testing.assert_array_equal(ds.pose2d[0], project(pose, np.array(CAM)))


@pytest.mark.parametrize("mutate, error", [
    (lambda r: r.update(pose3d=r["pose3d"][:15]), JointCountError),
    (lambda r: r.update(camera=[1145.0, 1145.0, 500.0]), CameraError),
    (lambda r: r.update(camera=[0.0, 1145.0, 500.0, 500.0]), CameraError),
    (lambda r: r["pose3d"][3].__setitem__(0, "NaN"), NonFiniteRecordError),
    (lambda r: r["pose3d"][7].__setitem__(2, -10.0), DepthError),
    (lambda r: r["pose3d"][7].__setitem__(2, 0.0), DepthError),
    (lambda r: r.pop("camera"), DatasetError),
])
def test_bad_records_name_their_index(topo, small_pools, tmp_path, mutate, error):
    good = record(small_pools["source"].pose3d[0])
    bad = json.loads(json.dumps(good))
    mutate(bad)
    text = json.dumps(bad).replace('"NaN"', "NaN")
    write_lines(tmp_path / "b.jsonl", header(topo), [good, good, text])
    with pytest.raises(error) as info:
        load_dataset(tmp_path / "b.jsonl")
    assert info.value.index == 2 and "record 2" in str(info.value)


def test_error_types_are_distinct():
    kinds = {JointCountError, CameraError, NonFiniteRecordError, DepthError}
    assert len(kinds) == 4 and all(issubclass(k, DatasetError) for k in kinds)


def test_header_checks(topo, tmp_path):
    write_lines(tmp_path / "h.jsonl", {"format": "other"}, [])
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "h.jsonl")
    write_lines(tmp_path / "h.jsonl", {**header(topo), "joint_count": 17}, [])
    with pytest.raises(JointCountError):
        load_dataset(tmp_path / "h.jsonl")
    write_lines(tmp_path / "h.jsonl", {**header(topo), "topology_hash": "deadbeef"}, [])
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "h.jsonl")


def test_from_records_and_subset(small_pools):
    ds = small_pools["source"]
    recs = [PoseRecord(ds.pose3d[i], ds.cams[i], subject="S9") for i in range(3)]
    built = PoseDataset.from_records(recs, ds.topology)
    assert len(built) == 3 and built.subjects == ["S9"] * 3
    mask = np.zeros(len(ds), bool)
    mask[[1, 4]] = True
    np.testing.assert_array_equal(ds.subset(mask).pose3d, ds.pose3d[[1, 4]])


# -- synthetic pools ----------------------------------------------------------------------

def tiny_synth(**kw):
    return SyntheticConfig(n_source=30, n_source_test=10, n_target=30, **kw)


def test_fixed_seed_is_reproducible():
    a, b = generate_synthetic(tiny_synth(), seed=5), generate_synthetic(tiny_synth(), seed=5)
    for k in a:
        np.testing.assert_array_equal(a[k].pose3d, b[k].pose3d)
    c = generate_synthetic(tiny_synth(), seed=6)
    assert not np.array_equal(a["source"].pose3d, c["source"].pose3d)


def test_zero_angle_ranges_give_one_posture(topo):
    cfg = tiny_synth()
    cfg = cfg.replace(angle_ranges={k: [[0.0, 0.0]] * 3 for k in cfg.angle_ranges})
    ds = generate_synthetic(cfg, seed=1)["source"]
    kcs = part_kcs(ds.pose3d, topo)
    for mat in kcs:
        np.testing.assert_allclose(mat, np.broadcast_to(mat[0], mat.shape), atol=1e-12)


def test_source_bone_lengths_match_template(topo):
    ds = generate_synthetic(tiny_synth(), seed=2)["source"]
    lengths = decompose(hierarchical_transform(ds.pose3d, topo)).lengths
    np.testing.assert_allclose(lengths, np.broadcast_to(lengths[0], lengths.shape), atol=1e-9)
    np.testing.assert_allclose(bone_lengths_of(ds), lengths, atol=1e-12)
    template = [TEMPLATE_LENGTHS[topo.joint_names[c]] for c in topo.bone_child]
    np.testing.assert_allclose(lengths[0], template, atol=1e-9)


def test_target_views_are_more_varied(small_pools):
    src = small_pools["source"].extra_column("elevation")
    tgt = small_pools["target"].extra_column("elevation")
    assert np.var(tgt) > np.var(src)


def test_all_samples_are_camera_valid(small_pools):
    for ds in small_pools.values():
        assert np.all(ds.pose3d[..., 2] > 100.0)
        assert np.all((ds.pose2d >= 0) & (ds.pose2d <= 1000))


def test_synthetic_config_validation():
    with pytest.raises(ConfigError):
        SyntheticConfig(n_source=0)
    with pytest.raises(ConfigError):
        SyntheticConfig.from_dict({"bogus": 1})


# -- command line -------------------------------------------------------------------------

SMALL = ["--n-source", "40", "--n-source-test", "12", "--n-target", "12"]
TRAIN = ["--epochs", "1", "--pretrain-epochs", "1", "--batch-size", "16", "--estimator-width", "16",
         "--estimator-blocks", "1", "--augmentor-hidden", "8", "--d3-hidden", "8", "--d2-hidden", "8"]


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--seed", "7", "--out", str(root / "data"), *SMALL]) == 0
    assert main(["train", "--data", str(root / "data" / "source.jsonl"), "--out", str(root / "run"), *TRAIN]) == 0
    return root


def test_gen_data_is_deterministic(cli_run, tmp_path):
    assert main(["gen-data", "--seed", "7", "--out", str(tmp_path), *SMALL]) == 0
    for name in ("source", "source_test", "target"):
        assert (tmp_path / f"{name}.jsonl").read_bytes() == (cli_run / "data" / f"{name}.jsonl").read_bytes()


def test_eval_reports_four_metrics(cli_run, capsys):
    out = cli_run / "eval.json"
    rc = main(["eval", "--checkpoint", str(cli_run / "run" / "final.ckpt"),
               "--data", str(cli_run / "data" / "target.jsonl"), "--out", str(out)])
    assert rc == 0
    rep = json.loads(out.read_text())
    for key in ("mpjpe_mm", "pa_mpjpe_mm", "pck", "auc"):
        assert np.isfinite(rep[key])
    assert rep["n_samples"] == 12
    assert json.loads(capsys.readouterr().out) == rep


def test_metrics_log_written(cli_run):
    lines = (cli_run / "run" / "metrics.csv").read_text().splitlines()
    assert lines[0].startswith("epoch,phase,beta") and len(lines) == 3


def test_infer_augment_dump_and_plot_dist(cli_run, tmp_path):
    ckpt = str(cli_run / "run" / "final.ckpt")
    data = str(cli_run / "data" / "source_test.jsonl")
    assert main(["infer", "--checkpoint", ckpt, "--data", data, "--out", str(tmp_path / "p.jsonl")]) == 0
    preds = [json.loads(ln) for ln in (tmp_path / "p.jsonl").read_text().splitlines()]
    assert len(preds) == 12 and np.shape(preds[0]["pose3d_root_relative"]) == (16, 3)
    assert main(["augment-dump", "--checkpoint", ckpt, "--data", data, "-n", "10",
                 "--out", str(tmp_path / "aug.jsonl")]) == 0
    assert 0 < len(load_dataset(tmp_path / "aug.jsonl")) <= 10
    assert main(["plot-dist", "--checkpoint", ckpt, "--data", data, "-n", "20", "--out", str(tmp_path / "d")]) == 0
    summary = json.loads((tmp_path / "d" / "summary.json").read_text())
    assert summary["position_trace_ratio"] > 0
    assert (tmp_path / "d" / "distribution.csv").exists() and (tmp_path / "d" / "distribution.dat").exists()


def test_pretrain_then_train_from_it(cli_run, tmp_path):
    data = str(cli_run / "data" / "source.jsonl")
    assert main(["pretrain", "--data", data, "--out", str(tmp_path / "est.ckpt"), *TRAIN]) == 0
    assert main(["train", "--data", data, "--out", str(tmp_path / "run"), "--init-estimator",
                 str(tmp_path / "est.ckpt"), *TRAIN]) == 0
    # pretraining was skipped, so only the training epoch is logged
    assert len((tmp_path / "run" / "metrics.csv").read_text().splitlines()) == 2


def test_resume_extends_training(cli_run, tmp_path):
    data = str(cli_run / "data" / "source.jsonl")
    rc = main(["train", "--data", data, "--out", str(tmp_path), "--resume",
               str(cli_run / "run" / "final.ckpt"), "--epochs", "2"])
    assert rc == 0
    assert len((tmp_path / "metrics.csv").read_text().splitlines()) == 2


def test_config_file(cli_run, tmp_path, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"synthetic": {"n_source": 5, "n_source_test": 5, "n_target": 5}}))
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
    assert len(load_dataset(tmp_path / "d" / "source.jsonl")) == 5
    monkeypatch.setenv("POSEAUG_CONFIG", str(cfg))
    assert main(["gen-data", "--out", str(tmp_path / "e")]) == 0
    assert len(load_dataset(tmp_path / "e" / "target.jsonl")) == 5


def test_exit_codes(cli_run, tmp_path):
    data = str(cli_run / "data" / "source.jsonl")
    assert main(["train", "--data", data, "--out", str(tmp_path), "--epochs", "0"]) == 1
    assert main(["train", "--data", data, "--out", str(tmp_path), "--no-such-flag"]) == 1
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt"), "--data", data]) != 0
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"format": "nope"}\n')
    assert main(["eval", "--checkpoint", str(cli_run / "run" / "final.ckpt"), "--data", str(bad)]) == 2
