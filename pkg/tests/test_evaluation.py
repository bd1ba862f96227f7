import numpy as np
import pytest

from oracles import ap_of_relevance, brute_map_cmc
from relreid.config import RunConfig
from relreid.dataio import load_manifest
from relreid.evaluation import (
    ablation_rows_to_dicts,
    ablation_run,
    default_grid,
    distance_matrix,
    embed_all,
    evaluate,
    evaluate_sets,
    render_ablation_table,
)
from relreid.head import representation_dim
from relreid.synth import SynthSpec, generate
from relreid.tensor import ShapeError
from relreid.training import train


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("evaldata")
    spec = SynthSpec(n_ids=6, imgs_per_id=4, n_eval_ids=3, seed=5)
    return load_manifest(generate(spec, str(out)))


def small_config(**overrides):
    doc = {"channels": 64, "embed_dim": 8, "n_k": 3, "n_m": 2, "epochs": 1, "lr": 3e-4}
    doc.update(overrides)
    return RunConfig.from_dict(doc)


class TestDistanceMatrix:
    def test_three_four_five(self):
        d = distance_matrix(np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]]))
        assert d[0, 0] == 5.0

    def test_identical_vectors(self):
        v = np.array([[1.0, 2.0, 3.0]])
        assert distance_matrix(v, v)[0, 0] == 0.0

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(0)
        q = rng.standard_normal((5, 7)).astype(np.float32)
        g = rng.standard_normal((9, 7)).astype(np.float32)
        d = distance_matrix(q, g)
        for i in range(5):
            for j in range(9):
                ref = np.sqrt(sum((float(a) - float(b)) ** 2 for a, b in zip(q[i], g[j])))
                np.testing.assert_allclose(d[i, j], ref, atol=1e-5)

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ShapeError, match="lengths"):
            distance_matrix(np.zeros((2, 3)), np.zeros((2, 4)))


class TestEvaluate:
    def test_ap_fixture_pattern(self):
        # distances realize the ranked relevance pattern [1, 0, 1, 0]
        dist = np.array([[1.0, 2.0, 3.0, 4.0]])
        result = evaluate(dist, [1], [0], [1, 2, 1, 3], [1, 1, 1, 1])
        expected = ap_of_relevance([1, 0, 1, 0])
        np.testing.assert_allclose(result.map_score, expected, atol=1e-12)
        np.testing.assert_allclose(result.map_score, 5.0 / 6.0, atol=1e-12)

    def test_perfect_ranking(self):
        dist = np.array([[0.1, 5.0], [9.0, 0.2]])
        result = evaluate(dist, [1, 2], [0, 0], [1, 2], [1, 1])
        assert result.cmc[0] == 1.0
        # single relevant entry ranked first: AP = 1 for both queries
        assert result.map_score == 1.0

    def test_same_camera_matches_excluded(self):
        # the only same-id entries share the query's camera: query invalid
        dist = np.array([[0.1, 0.2]])
        result = evaluate(dist, [1], [0], [1, 1], [0, 0])
        assert result.n_valid_queries == 0
        assert result.map_score == 0.0

    def test_junk_entries_never_influence_ranking(self):
        dist = np.array([[0.05, 0.1, 0.2]])
        # nearest gallery entry is junk (-1): skipped entirely
        result = evaluate(dist, [1], [0], [-1, 2, 1], [1, 1, 1])
        assert result.cmc[0] == 0.0 and result.cmc[1] == 1.0
        np.testing.assert_allclose(result.map_score, 0.5)

    def test_distance_ties_broken_by_gallery_index(self):
        dist = np.array([[0.5, 0.5]])
        # both at the same distance; the relevant one has the lower index
        r1 = evaluate(dist, [1], [0], [1, 2], [1, 1])
        assert r1.cmc[0] == 1.0
        r2 = evaluate(dist, [1], [0], [2, 1], [1, 1])
        assert r2.cmc[0] == 0.0

    def test_cmc_monotone_and_bounded(self):
        rng = np.random.default_rng(1)
        dist = rng.uniform(size=(6, 20))
        result = evaluate(dist, rng.integers(0, 4, 6), rng.integers(0, 2, 6),
                          rng.integers(0, 4, 20), rng.integers(0, 2, 20), max_rank=10)
        assert np.all(np.diff(result.cmc) >= 0)
        assert np.all((result.cmc >= 0) & (result.cmc <= 1))
        assert 0.0 <= result.map_score <= 1.0

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(40):
            n_q = int(rng.integers(1, 6))
            n_g = int(rng.integers(4, 32))
            dist = rng.uniform(size=(n_q, n_g))
            qp = rng.integers(0, 5, n_q)
            qc = rng.integers(0, 3, n_q)
            gp = rng.integers(-1, 5, n_g)
            gc = rng.integers(0, 3, n_g)
            mine = evaluate(dist, qp, qc, gp, gc, max_rank=10)
            ref_map, ref_cmc, ref_valid = brute_map_cmc(dist, qp, qc, gp, gc, max_rank=10)
            assert mine.n_valid_queries == ref_valid
            np.testing.assert_allclose(mine.map_score, ref_map, atol=1e-9)
            np.testing.assert_allclose(mine.cmc, ref_cmc, atol=1e-9)

    def test_misaligned_metadata_rejected(self):
        with pytest.raises(ShapeError, match="align"):
            evaluate(np.zeros((2, 3)), [1], [0], [1, 1, 1], [0, 0, 0])


class TestEmbedAll:
    def test_shapes_and_order(self, small_dataset):
        cfg = small_config()
        result = train(cfg, small_dataset)
        emb = embed_all(cfg, result.params, small_dataset, "gallery")
        entries = small_dataset.split_entries("gallery")
        assert emb.features.shape == (len(entries), representation_dim(cfg.head))
        assert emb.ids == [e.id for e in entries]

    def test_empty_split_is_fine(self, small_dataset, tmp_path):
        spec = SynthSpec(n_ids=2, imgs_per_id=2, n_eval_ids=0, seed=1)
        manifest = load_manifest(generate(spec, str(tmp_path / "noeval")))
        cfg = small_config(n_k=2)
        result = train(cfg, manifest)
        emb = embed_all(cfg, result.params, manifest, "query")
        assert emb.features.shape[0] == 0

    def test_repeated_invocation_bit_identical(self, small_dataset):
        cfg = small_config()
        result = train(cfg, small_dataset)
        a = embed_all(cfg, result.params, small_dataset, "query")
        b = embed_all(cfg, result.params, small_dataset, "query")
        np.testing.assert_array_equal(a.features, b.features)

    def test_trained_head_separates_eval_identities(self, small_dataset):
        cfg = small_config(epochs=8)
        result = train(cfg, small_dataset)
        q = embed_all(cfg, result.params, small_dataset, "query")
        g = embed_all(cfg, result.params, small_dataset, "gallery")
        scored = evaluate_sets(q, g)
        assert scored.n_valid_queries == 3
        assert scored.cmc[0] >= 2 / 3


class TestAblation:
    def test_grid_covers_full_cross_product(self):
        rows = default_grid()
        combos = {(r.global_pool, r.relation, r.multiscale)
                  for r in rows if r.use_global and r.use_local}
        assert len(combos) == 16
        assert any(r.use_global and not r.use_local for r in rows)
        assert any(r.use_local and not r.use_global for r in rows)

    def test_fdim_column_values(self, small_dataset):
        grid = [r for r in default_grid()
                if (not r.use_local) or (not r.use_global) or
                   (r.global_pool == "GCP" and r.relation)]
        base = small_config()
        rows = ablation_run(base, small_dataset, grid=grid)
        by_kind = {(r.use_global, r.use_local, r.multiscale): r.fdim for r in rows}
        c = base.head.embed_dim
        assert by_kind[(True, False, False)] == c
        assert by_kind[(False, True, False)] == 6 * c
        assert by_kind[(True, True, False)] == 7 * c
        assert by_kind[(True, True, True)] == 15 * c

    def test_table_rendering_is_deterministic(self, small_dataset):
        grid = [default_grid()[0]]
        base = small_config()
        t1 = render_ablation_table(ablation_run(base, small_dataset, grid=grid))
        grid2 = [default_grid()[0]]
        t2 = render_ablation_table(ablation_run(base, small_dataset, grid=grid2))
        assert t1 == t2
        assert "F-dim" in t1

    def test_rows_to_dicts(self):
        rows = default_grid()[:3]
        docs = ablation_rows_to_dicts(rows)
        assert {"gf", "lf", "rm", "ext", "gf_pool", "lf_pool", "fdim", "mAP", "rank1"} \
            <= set(docs[0])
