"""End-to-end CLI pipelines: outputs, determinism, error behavior."""

import json
from pathlib import Path

import numpy as np
import pytest

from hierembed.cli import main


def run(args):
    assert main(args) == 0


def tree_files(tmp_path, levels=3, branching=3):
    out = tmp_path / "tree"
    run(["gen-tree", "--levels", str(levels), "--branching", str(branching), "--out", str(out)])
    return out / "nodes.tsv", out / "edges.tsv", out


def dir_bytes(path: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(path.iterdir()) if p.is_file()}


class TestGenTree:
    def test_files_and_counts(self, tmp_path):
        nodes, edges, out = tree_files(tmp_path, 4, 3)
        assert len(nodes.read_text().splitlines()) == 40
        assert len(edges.read_text().splitlines()) == 39
        assert (out / "gen-tree.config.json").exists()

    def test_chain(self, tmp_path):
        nodes, _, _ = tree_files(tmp_path, 3, 1)
        assert len(nodes.read_text().splitlines()) == 3


class TestSplit:
    def test_outputs(self, tmp_path):
        nodes, edges, _ = tree_files(tmp_path, 4, 3)
        out = tmp_path / "split"
        run(["split", "--nodes", str(nodes), "--edges", str(edges),
             "--fraction", "0.25", "--seed", "5", "--out", str(out)])
        for name in ("train_edges.tsv", "val_edges.tsv", "test_edges.tsv", "eval_negatives.tsv"):
            assert (out / name).exists()
        negs = (out / "eval_negatives.tsv").read_text().splitlines()
        assert negs[0] == "split\tparent_id\tchild_id\tpos_ref"
        n_val = len((out / "val_edges.tsv").read_text().splitlines())
        assert sum(1 for l in negs[1:] if l.startswith("val\t")) == 10 * n_val


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Small end-to-end label pipeline shared across CLI tests."""
    root = tmp_path_factory.mktemp("pipe")
    nodes, edges, _ = tree_files(root, 4, 3)
    split = root / "split"
    run(["split", "--nodes", str(nodes), "--edges", str(edges),
         "--fraction", "0.5", "--seed", "7", "--out", str(split)])
    emb = root / "emb"
    run(["train-labels", "--nodes", str(nodes), "--edges", str(edges),
         "--split-dir", str(split), "--geometry", "ec", "--dim", "2",
         "--margin", "0.3", "--epochs", "60", "--seed", "1", "--out", str(emb)])
    return root, nodes, edges, split, emb


class TestTrainLabels:
    def test_outputs(self, pipeline):
        _, _, _, _, emb = pipeline
        assert (emb / "embeddings.emb").exists()
        assert (emb / "embeddings.emb.nodes.tsv").exists()
        log = (emb / "train_log.csv").read_text().splitlines()
        assert log[0] == "epoch,loss,val_f1,threshold"
        assert len(log) == 61
        assert (emb / "test_metrics.csv").exists()
        snap = json.loads((emb / "train-labels.config.json").read_text())
        assert snap["geometry"] == "ec" and snap["optimizer"] == "adam"

    def test_rerun_byte_identical(self, pipeline):
        root, nodes, edges, split, emb = pipeline
        before = dir_bytes(emb)
        run(["train-labels", "--nodes", str(nodes), "--edges", str(edges),
             "--split-dir", str(split), "--geometry", "ec", "--dim", "2",
             "--margin", "0.3", "--epochs", "60", "--seed", "1", "--out", str(emb)])
        after = dir_bytes(emb)
        assert before.keys() == after.keys()
        for name in before:
            assert before[name] == after[name], name


class TestReconstruct:
    def test_from_label_embeddings(self, pipeline, tmp_path):
        _, nodes, edges, _, emb = pipeline
        out = tmp_path / "rec"
        run(["reconstruct", "--nodes", str(nodes), "--edges", str(edges),
             "--model", str(emb / "embeddings.emb"), "--out", str(out)])
        lines = (out / "reconstruction.csv").read_text().splitlines()
        assert lines[0] == "TPR,TNR,full-F1,threshold"
        vals = lines[1].split(",")
        assert 0.0 <= float(vals[0]) <= 1.0


class TestExport2d:
    def test_raw2d(self, pipeline, tmp_path):
        _, nodes, edges, _, emb = pipeline
        out = tmp_path / "viz"
        run(["export-2d", "--nodes", str(nodes), "--edges", str(edges),
             "--model", str(emb / "embeddings.emb"), "--method", "raw2d", "--out", str(out)])
        lines = (out / "coords.tsv").read_text().splitlines()
        assert lines[0] == "node_id\tx\ty\tlevel"
        assert len(lines) == 41  # 40 nodes + header

    def test_pca_of_planar_data_preserves_geometry(self, tmp_path):
        # embed 2-D coordinates into 5-D, export via pca, compare pair distances
        from hierembed import storage
        from hierembed.hierarchy import generate_synthetic_tree, save_hierarchy

        h = generate_synthetic_tree(2, 3)
        nodes, edges = tmp_path / "n.tsv", tmp_path / "e.tsv"
        save_hierarchy(h, nodes, edges)
        rng = np.random.default_rng(0)
        flat = rng.standard_normal((4, 2))
        basis = np.linalg.qr(rng.standard_normal((5, 2)))[0].T  # (2, 5)
        coords = flat @ basis
        ids = tuple(sorted(n.node_id for n in h.nodes))
        storage.save_embeddings(tmp_path / "m.emb", ids, coords, "oe")
        out = tmp_path / "viz"
        run(["export-2d", "--nodes", str(nodes), "--edges", str(edges),
             "--model", str(tmp_path / "m.emb"), "--method", "pca", "--out", str(out)])
        rows = [l.split("\t") for l in (out / "coords.tsv").read_text().splitlines()[1:]]
        xy = np.array([[float(r[1]), float(r[2])] for r in rows])
        d_out = np.linalg.norm(xy[:, None] - xy[None, :], axis=2)
        d_in = np.linalg.norm(flat[:, None] - flat[None, :], axis=2)
        np.testing.assert_allclose(d_out, d_in, atol=1e-9)

    def test_raw2d_requires_2d(self, tmp_path):
        from hierembed import storage
        from hierembed.hierarchy import generate_synthetic_tree, save_hierarchy

        h = generate_synthetic_tree(2, 2)
        nodes, edges = tmp_path / "n.tsv", tmp_path / "e.tsv"
        save_hierarchy(h, nodes, edges)
        ids = tuple(sorted(n.node_id for n in h.nodes))
        storage.save_embeddings(tmp_path / "m.emb", ids, np.zeros((3, 4)), "oe")
        code = main(["export-2d", "--nodes", str(nodes), "--edges", str(edges),
                     "--model", str(tmp_path / "m.emb"), "--method", "raw2d",
                     "--out", str(tmp_path / "viz")])
        assert code == 1


@pytest.fixture(scope="module")
def joint_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("joint")
    nodes, edges, _ = tree_files(root, 3, 2)
    feats = root / "feats"
    run(["gen-features", "--nodes", str(nodes), "--edges", str(edges),
         "--per-leaf", "10", "--dim", "16", "--seed", "3", "--out", str(feats)])
    model = root / "model"
    run(["train-joint", "--nodes", str(nodes), "--edges", str(edges),
         "--features", str(feats / "features.feat"), "--geometry", "ec",
         "--dim", "4", "--epochs", "40", "--seed", "2", "--out", str(model)])
    return root, nodes, edges, feats, model


class TestJointPipeline:

    def test_gen_features_files(self, joint_run):
        _, _, _, feats, _ = joint_run
        assert (feats / "features.feat").exists()
        assert (feats / "instances.tsv").exists()
        assert len((feats / "instances.tsv").read_text().splitlines()) == 40
        assert (feats / "instances-levels.tsv").exists()

    def test_model_and_log(self, joint_run):
        _, _, _, _, model = joint_run
        assert (model / "model.bin").exists()
        log = (model / "train_log.csv").read_text().splitlines()
        assert log[0] == "epoch,loss,val_f1"
        assert len(log) == 41

    def test_classify_rows_per_instance(self, joint_run):
        root, nodes, edges, feats, model = joint_run
        out = root / "cls"
        run(["classify", "--nodes", str(nodes), "--edges", str(edges),
             "--model", str(model / "model.bin"),
             "--features", str(feats / "features.feat"),
             "--subset", "test", "--out", str(out)])
        rows = (out / "predictions.tsv").read_text().splitlines()
        n_test = 4  # 10% of 40
        assert len(rows) == n_test * 3  # L rows per instance
        metrics = (out / "metrics.csv").read_text().splitlines()
        assert metrics[0].startswith("m-F1,L1,L2,L3,hit3_final")

    def test_classify_deterministic(self, joint_run, tmp_path):
        root, nodes, edges, feats, model = joint_run
        out = tmp_path / "c1"
        args = ["classify", "--nodes", str(nodes), "--edges", str(edges),
                "--model", str(model / "model.bin"),
                "--features", str(feats / "features.feat"),
                "--subset", "val", "--out", str(out)]
        run(args)
        before = dir_bytes(out)
        run(args)
        assert before == dir_bytes(out)

    def test_reconstruct_from_joint_model(self, joint_run, tmp_path):
        root, nodes, edges, _, model = joint_run
        out = tmp_path / "rec"
        run(["reconstruct", "--nodes", str(nodes), "--edges", str(edges),
             "--model", str(model / "model.bin"), "--out", str(out)])
        assert (out / "reconstruction.csv").exists()

    def test_init_labels_missing_file(self, joint_run, tmp_path):
        root, nodes, edges, feats, _ = joint_run
        code = main(["train-joint", "--nodes", str(nodes), "--edges", str(edges),
                     "--features", str(feats / "features.feat"), "--geometry", "ec",
                     "--dim", "4", "--epochs", "1", "--init-labels",
                     str(tmp_path / "missing.emb"), "--out", str(tmp_path / "m")])
        assert code == 1


class TestClassifierPipeline:
    def test_train_classifier(self, tmp_path):
        nodes, edges, _ = tree_files(tmp_path, 3, 2)
        feats = tmp_path / "feats"
        run(["gen-features", "--nodes", str(nodes), "--edges", str(edges),
             "--per-leaf", "15", "--dim", "16", "--seed", "3", "--out", str(feats)])
        out = tmp_path / "clf"
        run(["train-classifier", "--nodes", str(nodes), "--edges", str(edges),
             "--features", str(feats / "features.feat"),
             "--labels", str(feats / "instances-levels.tsv"),
             "--head", "mc", "--epochs", "40", "--lr", "0.05",
             "--seed", "1", "--out", str(out)])
        assert (out / "classifier.bin").exists()
        metrics = (out / "metrics.csv").read_text().splitlines()
        assert metrics[0] == "aggregation,m-F1,L1,L2,L3"
        m_f1 = float(metrics[1].split(",")[1])
        assert m_f1 > 0.8  # separable clusters

    def test_hab_reports_count_stats(self, tmp_path):
        nodes, edges, _ = tree_files(tmp_path, 3, 2)
        feats = tmp_path / "feats"
        run(["gen-features", "--nodes", str(nodes), "--edges", str(edges),
             "--per-leaf", "15", "--dim", "16", "--seed", "3", "--out", str(feats)])
        out = tmp_path / "clf"
        run(["train-classifier", "--nodes", str(nodes), "--edges", str(edges),
             "--features", str(feats / "features.feat"),
             "--head", "hab", "--epochs", "40", "--lr", "0.05",
             "--seed", "1", "--out", str(out)])
        lines = (out / "metrics.csv").read_text().splitlines()
        assert lines[0].endswith("pred_min,pred_max,pred_mean,pred_std")
        assert lines[1].startswith("joint,")
        assert lines[2].startswith("per-level,")


class TestConvertEthec:
    def test_convert(self, tmp_path):
        meta = {
            "img_a": {"family": "F1", "subfamily": "S1", "genus": "G1", "specific_epithet": "x"},
            "img_b": {"family": "F1", "subfamily": "S1", "genus": "G1", "specific_epithet": "y"},
        }
        src = tmp_path / "meta.json"
        src.write_text(json.dumps(meta), encoding="utf-8")
        out = tmp_path / "ethec"
        run(["convert-ethec", "--metadata", str(src), "--out", str(out)])
        assert (out / "nodes.tsv").exists()
        assert (out / "edges.tsv").exists()
        assert len((out / "instances-levels.tsv").read_text().splitlines()) == 2


class TestErrors:
    def test_machine_readable_error_line(self, tmp_path, capsys):
        code = main(["split", "--nodes", str(tmp_path / "missing.tsv"),
                     "--edges", str(tmp_path / "missing2.tsv"),
                     "--out", str(tmp_path / "out")])
        assert code == 1
        err = capsys.readouterr().err.strip().splitlines()[-1]
        payload = json.loads(err)
        assert payload["command"] == "split"
        assert "error" in payload


class TestRerun:
    def test_snapshot_round_trip(self, tmp_path):
        tree = tmp_path / "tree"
        run(["gen-tree", "--levels", "3", "--branching", "2", "--out", str(tree)])
        split = tmp_path / "split"
        run(["split", "--nodes", str(tree / "nodes.tsv"), "--edges", str(tree / "edges.tsv"),
             "--fraction", "0.5", "--seed", "3", "--out", str(split)])
        before = dir_bytes(split)
        run(["rerun", "--config", str(split / "split.config.json")])
        assert before == dir_bytes(split)

    def test_rerun_training_snapshot(self, pipeline):
        _, _, _, _, emb = pipeline
        before = dir_bytes(emb)
        run(["rerun", "--config", str(emb / "train-labels.config.json")])
        assert before == dir_bytes(emb)
