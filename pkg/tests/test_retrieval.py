import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ticir import (
    EmbeddingIndex,
    InputError,
    PSEUDO_MARKER,
    QuerySpec,
    build_index,
    compose_baseline_query,
    compose_dual_caption_query,
    compose_inversion_query,
    compose_pseudo_query,
    near_duplicate_filter,
    search,
)
from ticir.errors import FormatError

from conftest import synthetic_image


@pytest.fixture(scope="module")
def index(backbone, image_arrays):
    return build_index(image_arrays, backbone)


def brute_force_search(query, index, k, exclude=()):
    query = np.asarray(query, dtype=float)
    query = query / np.linalg.norm(query)
    scored = [
        (image_id, float(sum(a * b for a, b in zip(index.matrix[i], query))))
        for i, image_id in enumerate(index.ids)
        if image_id not in set(exclude)
    ]
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return scored[:k]


def assert_same_ranking(results, expected):
    """Same ids in the same order; scores may differ in the last float ulp."""
    assert [image_id for image_id, _ in results] == [image_id for image_id, _ in expected]
    np.testing.assert_allclose([s for _, s in results], [s for _, s in expected], atol=1e-12)


class TestIndex:
    def test_build_shapes_and_norms(self, index, image_arrays):
        assert len(index) == len(image_arrays)
        norms = np.linalg.norm(index.matrix, axis=1)
        assert np.all(np.abs(norms - 1.0) <= 1e-5)

    def test_rebuild_identical(self, backbone, image_arrays):
        a = build_index(image_arrays, backbone)
        b = build_index(image_arrays, backbone)
        assert np.array_equal(a.matrix, b.matrix)

    def test_duplicate_ids(self, backbone, image_arrays):
        pairs = [("same", image_arrays["img00"]), ("same", image_arrays["img01"])]
        with pytest.raises(InputError):
            build_index(pairs, backbone)

    def test_empty(self, backbone):
        with pytest.raises(InputError):
            build_index({}, backbone)

    def test_non_unit_rows_rejected(self):
        with pytest.raises(InputError):
            EmbeddingIndex(ids=["a"], matrix=np.array([[2.0, 0.0]]))

    def test_save_load_roundtrip(self, index, tmp_path):
        path = tmp_path / "index.bin"
        index.save(path)
        loaded = EmbeddingIndex.load(path)
        assert loaded.ids == index.ids
        assert np.allclose(loaded.matrix, index.matrix, atol=1e-6)

    def test_load_rejects_unnormalized_store(self, tmp_path):
        from ticir.storage import save_feature_store

        path = tmp_path / "feat.bin"
        save_feature_store(path, ["a"], np.array([[1.0, 0.0]]), normalized=False)
        with pytest.raises(FormatError):
            EmbeddingIndex.load(path)

    def test_row_lookup(self, index):
        assert np.array_equal(index.row("img00"), index.matrix[index.ids.index("img00")])
        with pytest.raises(InputError):
            index.row("nope")


class TestQueryComposition:
    def test_template_form(self, backbone):
        pseudo = np.random.default_rng(0).standard_normal(16)
        query = compose_pseudo_query(pseudo, "shows the dog running", backbone)
        manual = backbone.encode_text_with_pseudo(f"a photo of {PSEUDO_MARKER} that shows the dog running", pseudo)
        assert np.allclose(query, manual / np.linalg.norm(manual))

    def test_shared_concept_form(self, backbone):
        pseudo = np.random.default_rng(0).standard_normal(16)
        concept = "a close-up dog wearing a hat indoors"
        query = compose_pseudo_query(pseudo, "is outside", backbone, shared_concept=concept)
        manual = backbone.encode_text_with_pseudo(
            f"a photo of {concept} {PSEUDO_MARKER} that is outside", pseudo)
        assert np.allclose(query, manual / np.linalg.norm(manual))
        plain = compose_pseudo_query(pseudo, "is outside", backbone)
        assert not np.allclose(query, plain)

    def test_unit_norm(self, backbone):
        pseudo = np.random.default_rng(1).standard_normal(16)
        query = compose_pseudo_query(pseudo, "has two dogs", backbone)
        assert abs(np.linalg.norm(query) - 1.0) <= 1e-5

    def test_empty_caption(self, backbone):
        with pytest.raises(InputError):
            compose_pseudo_query(np.ones(16), "  ", backbone)


class TestDualCaption:
    def test_swap_bitwise_identical(self, backbone):
        pseudo = np.random.default_rng(2).standard_normal(16)
        ab = compose_dual_caption_query(pseudo, "is red", "has a collar", backbone)
        ba = compose_dual_caption_query(pseudo, "has a collar", "is red", backbone)
        assert np.array_equal(ab, ba)

    def test_equal_captions_collapse(self, backbone):
        pseudo = np.random.default_rng(3).standard_normal(16)
        dual = compose_dual_caption_query(pseudo, "is red", "is red", backbone)
        single = compose_pseudo_query(pseudo, "is red and is red", backbone)
        assert np.allclose(dual, single)

    def test_average_differs_from_each_order(self, backbone):
        pseudo = np.random.default_rng(4).standard_normal(16)
        dual = compose_dual_caption_query(pseudo, "is red", "has stripes", backbone)
        first = compose_pseudo_query(pseudo, "is red and has stripes", backbone)
        second = compose_pseudo_query(pseudo, "has stripes and is red", backbone)
        assert not np.allclose(dual, first)
        assert not np.allclose(dual, second)


class TestBaselines:
    def test_image_only_equals_index_row(self, backbone, index):
        spec = QuerySpec(mode="image_only", reference_id="img01")
        query = compose_baseline_query(spec, backbone, index)
        assert np.array_equal(query, index.row("img01"))

    def test_image_plus_text_collinear(self, backbone):
        # when the caption feature points where the image already points,
        # the sum keeps that direction
        unit = np.zeros(16)
        unit[0] = 1.0
        index = EmbeddingIndex(ids=["ref"], matrix=unit[None, :])

        class CollinearBackbone:
            feature_dim = 16

            def encode_text(self, text):
                return unit * 3.0

        spec = QuerySpec(mode="image_plus_text", reference_id="ref", captions=("anything",))
        query = compose_baseline_query(spec, CollinearBackbone(), index)
        assert np.allclose(query, unit)

    def test_image_plus_text_orthogonal(self, backbone):
        e1, e2 = np.eye(16)[0], np.eye(16)[1]
        index = EmbeddingIndex(ids=["ref"], matrix=e1[None, :])

        class OrthogonalBackbone:
            feature_dim = 16

            def encode_text(self, text):
                return e2 * 7.0

        spec = QuerySpec(mode="image_plus_text", reference_id="ref", captions=("x",))
        query = compose_baseline_query(spec, OrthogonalBackbone(), index)
        assert query @ e1 == pytest.approx(1 / np.sqrt(2))
        assert query @ e2 == pytest.approx(1 / np.sqrt(2))

    def test_text_only(self, backbone, index):
        spec = QuerySpec(mode="text_only", captions=("a dog on grass",))
        query = compose_baseline_query(spec, backbone, index)
        manual = backbone.encode_text("a dog on grass")
        assert np.allclose(query, manual / np.linalg.norm(manual))

    def test_captioning_requires_adapter(self, backbone, index):
        spec = QuerySpec(mode="captioning", reference_id="img00", captions=("is bigger",))
        with pytest.raises(InputError):
            compose_baseline_query(spec, backbone, index)

    def test_captioning_with_adapter(self, backbone, index):
        spec = QuerySpec(mode="captioning", reference_id="img00", captions=("is bigger",))
        query = compose_baseline_query(spec, backbone, index, captioner=lambda image_id: "a fluffy dog")
        manual = backbone.encode_text("a photo of a fluffy dog that is bigger")
        assert np.allclose(query, manual / np.linalg.norm(manual))

    def test_inversion_spec_dispatch(self, backbone, index):
        pseudo = np.random.default_rng(5).standard_normal(16)
        spec = QuerySpec(mode="inversion", reference_id="img00", captions=("is small", "is red"))
        query = compose_inversion_query(spec, pseudo, backbone)
        assert np.array_equal(query, compose_dual_caption_query(pseudo, "is small", "is red", backbone))
        with pytest.raises(InputError):
            compose_baseline_query(spec, backbone, index)


class TestQuerySpecValidation:
    def test_modes_requiring_reference(self):
        for mode in ("inversion", "image_only", "image_plus_text", "captioning"):
            with pytest.raises(InputError):
                QuerySpec(mode=mode, captions=("x",))

    def test_text_modes_require_caption(self):
        with pytest.raises(InputError):
            QuerySpec(mode="text_only")
        with pytest.raises(InputError):
            QuerySpec(mode="inversion", reference_id="r")

    def test_unknown_mode(self):
        with pytest.raises(InputError):
            QuerySpec(mode="telepathy", captions=("x",))

    def test_caption_limit(self):
        with pytest.raises(InputError):
            QuerySpec(mode="text_only", captions=("a", "b", "c"))


class TestSearch:
    def test_full_argsort(self, index):
        query = np.random.default_rng(6).standard_normal(16)
        assert_same_ranking(search(query, index, k=len(index)), brute_force_search(query, index, len(index)))

    def test_query_equal_to_row(self, index):
        results = search(index.row("img03"), index, k=1)
        assert results[0][0] == "img03"
        assert results[0][1] == pytest.approx(1.0, abs=1e-9)

    def test_matches_bruteforce_on_random_instances(self):
        rng = np.random.default_rng(7)
        matrix = rng.standard_normal((50, 16))
        matrix /= np.linalg.norm(matrix, axis=1, keepdims=True)
        index = EmbeddingIndex(ids=[f"v{i:03d}" for i in range(50)], matrix=matrix)
        for trial in range(20):
            query = rng.standard_normal(16)
            k = int(rng.integers(1, 51))
            assert_same_ranking(search(query, index, k), brute_force_search(query, index, k))

    def test_positive_scaling_invariance(self, index):
        query = np.random.default_rng(8).standard_normal(16)
        base = [image_id for image_id, _ in search(query, index, k=len(index))]
        scaled = [image_id for image_id, _ in search(query * 7.3, index, k=len(index))]
        assert base == scaled

    def test_exclusion(self, index):
        query = index.row("img02")
        results = search(query, index, k=len(index) - 1, exclude={"img02"})
        assert all(image_id != "img02" for image_id, _ in results)

    def test_k_bounds(self, index):
        query = index.row("img00")
        with pytest.raises(InputError):
            search(query, index, k=0)
        with pytest.raises(InputError):
            search(query, index, k=len(index) + 1)
        with pytest.raises(InputError):
            search(query, index, k=len(index), exclude={"img00"})

    def test_tie_break_ascending_id(self):
        row = np.zeros(16)
        row[0] = 1.0
        matrix = np.stack([row, row, row])
        index = EmbeddingIndex(ids=["zeta", "alpha", "mid"], matrix=matrix)
        results = search(row, index, k=3)
        assert [image_id for image_id, _ in results] == ["alpha", "mid", "zeta"]

    @settings(max_examples=25, deadline=None)
    @given(st.integers(min_value=0, max_value=2**31 - 1), st.integers(min_value=1, max_value=12))
    def test_bruteforce_property(self, seed, k):
        rng = np.random.default_rng(seed)
        matrix = rng.standard_normal((12, 8))
        matrix /= np.linalg.norm(matrix, axis=1, keepdims=True)
        index = EmbeddingIndex(ids=[f"n{i}" for i in range(12)], matrix=matrix)
        query = rng.standard_normal(8)
        assert_same_ranking(search(query, index, k), brute_force_search(query, index, k))


class TestNearDuplicateFilter:
    def test_strict_threshold(self):
        candidates = [("a", 0.95), ("b", 0.92), ("c", 0.80)]
        assert near_duplicate_filter(candidates, 0.92) == [("b", 0.92), ("c", 0.80)]

    def test_threshold_one_keeps_everything(self):
        candidates = [("a", 1.0), ("b", 0.5)]
        assert near_duplicate_filter(candidates, 1.0) == candidates

    def test_invalid_threshold(self):
        with pytest.raises(InputError):
            near_duplicate_filter([], -1.0)
