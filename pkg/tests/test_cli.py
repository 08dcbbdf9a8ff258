"""End-to-end CLI contracts: determinism, exit codes, library equivalence,
and the PGM visualization layout."""

import json

import numpy as np
import pytest

from epiguide.cli import attention_canvas, build_training_pairs, main, write_pgm
from epiguide.dataio import load_manifest
from epiguide.evaluation import (
    RetrievalIndex,
    mean_average_precision,
    recall_at_k,
    run_retrieval,
)
from epiguide.geometry import FundamentalMatrix
from epiguide.guides import GridSpec, rasterize_guide
from epiguide.reranker import (
    ModelConfig,
    TrainSchedule,
    init_params,
    load_checkpoint,
    save_checkpoint,
    train,
)


def tree_bytes(root):
    return {
        p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()
    }


def gen(out, seed=1, extra=()):
    code = main(
        [
            "gen",
            "--seed",
            str(seed),
            "--out-dir",
            str(out),
            "--instances",
            "4",
            "--categories",
            "2",
            "--views",
            "5",
        ]
        + list(extra)
    )
    assert code == 0
    return out / "manifest.jsonl"


class TestGen:
    def test_counts_and_split(self, tmp_path):
        manifest = load_manifest(gen(tmp_path / "b"))
        assert len(manifest.records) == 20
        train_inst = {r.instance_id for r in manifest.split("train")}
        test_inst = {r.instance_id for r in manifest.split("test")}
        assert len(train_inst) == 2 and len(test_inst) == 2
        assert not train_inst & test_inst

    def test_byte_identical_reruns(self, tmp_path):
        gen(tmp_path / "a", seed=7)
        gen(tmp_path / "b", seed=7)
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    def test_env_var_overrides_out_dir(self, tmp_path, monkeypatch):
        monkeypatch.setenv("EPIGUIDE_OUT", str(tmp_path / "envdir"))
        gen(tmp_path / "flagdir", seed=2)
        assert (tmp_path / "envdir" / "manifest.jsonl").exists()
        assert not (tmp_path / "flagdir").exists()

    def test_unknown_flag_rejected(self, tmp_path):
        with pytest.raises(SystemExit) as err:
            main(["gen", "--seed", "1", "--frobnicate", "2"])
        assert err.value.code == 2


SMALL = ["--config", "3,8,2,2", "--grid-size", "3", "--dim", "8"]


def small_bench(tmp_path, seed=1):
    return gen(tmp_path / "bench", seed=seed, extra=["--grid-size", "3", "--dim", "8"])


def train_args(manifest, out, *extra):
    return [
        "train",
        "--seed",
        "3",
        "--manifest",
        str(manifest),
        "--out-dir",
        str(out),
        "--config",
        "3,8,2,2",
        "--epochs-phase1",
        "1",
        "--epochs-phase2",
        "1",
    ] + list(extra)


class TestTrain:
    def test_loss_none_equals_lambda_zero(self, tmp_path):
        manifest = small_bench(tmp_path)
        assert main(train_args(manifest, tmp_path / "n", "--loss", "none")) == 0
        assert main(train_args(manifest, tmp_path / "z", "--loss", "epi", "--lambda", "0")) == 0
        a = (tmp_path / "n" / "checkpoint.epga").read_bytes()
        b = (tmp_path / "z" / "checkpoint.epga").read_bytes()
        assert a == b

    def test_missing_manifest_exit_2(self, tmp_path, capsys):
        missing = tmp_path / "nowhere" / "manifest.jsonl"
        assert main(train_args(missing, tmp_path / "r")) == 2
        assert str(missing) in capsys.readouterr().err

    def test_log_shows_decreasing_bce(self, tmp_path):
        manifest = small_bench(tmp_path)
        out = tmp_path / "run"
        args = train_args(manifest, out)
        args[args.index("--epochs-phase1") + 1] = "4"
        args[args.index("--epochs-phase2") + 1] = "0"
        args += ["--lr", "3e-3"]
        assert main(args) == 0
        rows = [
            json.loads(line)
            for line in (out / "train_log.jsonl").read_text().splitlines()
        ]
        assert rows[-1]["match_bce"] < rows[0]["match_bce"]

    def test_matches_library_call_bitwise(self, tmp_path):
        manifest_path = small_bench(tmp_path)
        out = tmp_path / "cli"
        assert main(train_args(manifest_path, out, "--loss", "epi")) == 0

        manifest = load_manifest(manifest_path)
        config = ModelConfig(
            s=3, m=8, heads=2, layers=2, num_freqs=2,
            loss_variant="epi", lambda_epi=1.0, seed=3,
        )
        pairs = build_training_pairs(manifest, config, seed=3)
        params, _ = train(
            pairs,
            config,
            TrainSchedule(phase1_epochs=1, phase2_epochs=1, learning_rate=3e-4),
        )
        ref = tmp_path / "lib.epga"
        save_checkpoint(ref, params)
        assert ref.read_bytes() == (out / "checkpoint.epga").read_bytes()

    def test_divergence_exit_4(self, tmp_path):
        manifest = small_bench(tmp_path)
        assert main(train_args(manifest, tmp_path / "d", "--lr", "1e150")) == 4


def eval_args(manifest, out, *extra):
    return ["eval", "--manifest", str(manifest), "--out-dir", str(out)] + list(extra)


def read_blocks(out):
    return [
        json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()
    ]


class TestEval:
    def test_report_keys(self, tmp_path):
        manifest = small_bench(tmp_path)
        out = tmp_path / "m"
        assert main(eval_args(manifest, out)) == 0
        report = read_blocks(out)[0]
        assert {"R@1", "R@10", "R@50", "mAP"} <= set(report)
        assert (out / "pr_curves.csv").read_text().startswith("query_id,recall,precision\n")

    def test_constant_model_matches_global_only(self, tmp_path):
        manifest = small_bench(tmp_path)
        config = ModelConfig(s=3, m=8, heads=2, layers=2, mlp_width=16, num_freqs=2)
        params = init_params(config)
        for name, t in params.tensors.items():
            if name.rsplit(".", 1)[-1] not in ("ln1_g", "ln2_g"):
                params.tensors[name] = np.zeros_like(t)
        checkpoint = tmp_path / "const.epga"
        save_checkpoint(checkpoint, params)

        out_a, out_b = tmp_path / "plain", tmp_path / "const"
        assert main(eval_args(manifest, out_a)) == 0
        assert main(eval_args(manifest, out_b, "--checkpoint", str(checkpoint))) == 0
        a, b = read_blocks(out_a)[0], read_blocks(out_b)[0]
        b.pop("k_rerank")
        assert a == b

    def test_matches_library_calls(self, tmp_path):
        manifest_path = small_bench(tmp_path)
        out = tmp_path / "run"
        assert main(train_args(manifest_path, out)) == 0
        checkpoint = out / "checkpoint.epga"
        assert (
            main(
                eval_args(
                    manifest_path, out, "--checkpoint", str(checkpoint), "--k-rerank", "5"
                )
            )
            == 0
        )
        report = read_blocks(out)[0]

        index = RetrievalIndex.from_manifest(load_manifest(manifest_path), split="test")
        rankings = list(
            run_retrieval(index, load_checkpoint(checkpoint), k_rerank=5).values()
        )
        positives = {r.query_id: index.positives(r.query_id) for r in rankings}
        assert report["R@1"] == recall_at_k(rankings, positives, 1)
        assert report["R@10"] == recall_at_k(rankings, positives, 10)
        assert report["mAP"] == mean_average_precision(rankings, positives)
        assert report["queries"] == len(rankings)

    def test_threads_do_not_change_output(self, tmp_path):
        manifest = small_bench(tmp_path)
        out1, out4 = tmp_path / "t1", tmp_path / "t4"
        assert main(eval_args(manifest, out1, "--threads", "1")) == 0
        assert main(eval_args(manifest, out4, "--threads", "4")) == 0
        assert (out1 / "metrics.jsonl").read_bytes() == (out4 / "metrics.jsonl").read_bytes()


def parse_pgm(path):
    parts = path.read_text().split()
    assert parts[0] == "P2"
    width, height, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    values = np.array([int(v) for v in parts[4:]]).reshape(height, width)
    return values, maxval


class TestViz:
    def test_layout_and_outputs(self, tmp_path):
        manifest_path = gen(tmp_path / "bench", seed=4)
        out = tmp_path / "run"
        assert main(
            [
                "train",
                "--seed",
                "1",
                "--manifest",
                str(manifest_path),
                "--out-dir",
                str(out),
                "--epochs-phase1",
                "1",
                "--epochs-phase2",
                "0",
                "--pairs-per-epoch",
                "4",
            ]
        ) == 0
        manifest = load_manifest(manifest_path)
        pair = [r.image_id for r in manifest.records[:2]]
        viz = tmp_path / "viz"
        assert main(
            [
                "viz",
                "--manifest",
                str(manifest_path),
                "--checkpoint",
                str(out / "checkpoint.epga"),
                "--pair",
                *pair,
                "--out-dir",
                str(viz),
            ]
        ) == 0
        for name in ("attn12", "attn21", "guide12", "guide21"):
            values, maxval = parse_pgm(viz / f"{name}.pgm")
            assert values.shape == (55, 55)
            assert maxval == 255
            assert values.min() >= 0 and values.max() <= 255

    def test_head_index_selects_one_head(self, tmp_path):
        manifest_path = gen(tmp_path / "bench", seed=5)
        manifest = load_manifest(manifest_path)
        config = ModelConfig()
        checkpoint = tmp_path / "model.epga"
        save_checkpoint(checkpoint, init_params(config))
        pair = [r.image_id for r in manifest.records[:2]]
        base = ["viz", "--manifest", str(manifest_path), "--checkpoint", str(checkpoint), "--pair", *pair]
        assert main(base + ["--out-dir", str(tmp_path / "h0"), "--head", "0"]) == 0
        assert main(base + ["--out-dir", str(tmp_path / "h1"), "--head", "1"]) == 0
        a, _ = parse_pgm(tmp_path / "h0" / "attn12.pgm")
        b, _ = parse_pgm(tmp_path / "h1" / "attn12.pgm")
        assert not np.array_equal(a, b)
        assert main(base + ["--out-dir", str(tmp_path / "h9"), "--head", "9"]) == 2

    def test_rectified_guide_lights_one_row_per_patch(self):
        # y2 = y1 epipolar geometry: every source cell maps to one grid row
        f = FundamentalMatrix.from_matrix(
            np.array([[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
        )
        grid = GridSpec(s=7, width=224, height=224)
        guide = rasterize_guide(f, grid, grid)
        canvas = attention_canvas(guide.g12.astype(np.float64), 7)
        for idx in range(49):
            r, c = divmod(idx, 7)
            patch = canvas[r * 8 : r * 8 + 7, c * 8 : c * 8 + 7]
            lit_rows = {int(i) for i in np.nonzero(patch.any(axis=1))[0]}
            assert lit_rows == {r}

    def test_write_pgm_round_trip(self, tmp_path):
        image = np.arange(12, dtype=np.uint8).reshape(3, 4) * 20
        path = tmp_path / "x.pgm"
        write_pgm(path, image)
        values, maxval = parse_pgm(path)
        assert np.array_equal(values, image) and maxval == 255


class TestEstimateF:
    @pytest.fixture()
    def correspondence_file(self, tmp_path):
        import sys

        sys.path.insert(0, "tests")
        from geomtools import ball_points, project, random_orbit_pair

        from epiguide.estimation import Correspondences, save_correspondences

        rng = np.random.default_rng(2)
        v1, v2 = random_orbit_pair(rng)
        pts = ball_points(rng, 300)
        x1, z1 = project(v1, pts)
        x2, z2 = project(v2, pts)
        ok = z1 & z2

        def write(n):
            path = tmp_path / f"corr{n}.json"
            save_correspondences(
                path, Correspondences(np.hstack([x1[ok][:n], x2[ok][:n]]))
            )
            return path

        return write

    def test_clean_input_reliable(self, correspondence_file, capsys):
        path = correspondence_file(60)
        assert main(["estimate-f", "--correspondences", str(path)]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[-1] == "reliable: true"
        assert lines[-2] == "inliers: 60 / 60"

    def test_few_matches_gate_exit_3(self, correspondence_file, capsys):
        path = correspondence_file(15)
        assert main(["estimate-f", "--correspondences", str(path)]) == 3
        assert "reliable: false" in capsys.readouterr().out

    def test_same_seed_identical_report(self, correspondence_file, capsys):
        path = correspondence_file(40)
        main(["estimate-f", "--correspondences", str(path), "--seed", "9"])
        first = capsys.readouterr().out
        main(["estimate-f", "--correspondences", str(path), "--seed", "9"])
        assert capsys.readouterr().out == first


class TestPairBuilding:
    def test_counts_labels_and_guides(self, tmp_path):
        manifest = load_manifest(small_bench(tmp_path))
        config = ModelConfig(s=3, m=8, heads=2, layers=1, mlp_width=16, num_freqs=2)
        pairs = build_training_pairs(manifest, config, seed=0)
        # 2 train instances x C(5,2) positives, one negative each
        assert len(pairs) == 40
        positives = [p for p in pairs if p.label == 1]
        negatives = [p for p in pairs if p.label == 0]
        assert len(positives) == len(negatives) == 20
        assert all(p.guide is not None for p in positives)
        assert all(p.guide is None for p in negatives)
        assert all(p.epe is None for p in pairs)

    def test_epe_attaches_geometry_everywhere(self, tmp_path):
        manifest = load_manifest(small_bench(tmp_path))
        config = ModelConfig(s=3, m=8, heads=2, layers=1, mlp_width=16, num_freqs=2, epe_enabled=True)
        pairs = build_training_pairs(manifest, config, seed=0, epe=True)
        assert all(p.epe is not None for p in pairs)
        for p in pairs:
            if p.label == 1:
                assert p.epe.view1 is not None
            else:
                assert p.epe.view1 is None

    def test_deterministic(self, tmp_path):
        manifest = load_manifest(small_bench(tmp_path))
        config = ModelConfig(s=3, m=8, heads=2, layers=1, mlp_width=16, num_freqs=2)
        a = build_training_pairs(manifest, config, seed=5)
        b = build_training_pairs(manifest, config, seed=5)
        assert len(a) == len(b)
        for pa, pb in zip(a, b):
            assert pa.label == pb.label
            assert np.array_equal(pa.grid1, pb.grid1)
            assert np.array_equal(pa.grid2, pb.grid2)
