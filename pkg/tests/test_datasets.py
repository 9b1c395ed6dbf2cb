import json

import pytest

from ticir import (
    CIRCODataset,
    CIRCOQuery,
    CIRRTriplet,
    DatasetValidationError,
    FashionIQTriplet,
    FormatError,
    InputError,
    SEMANTIC_ASPECTS,
    coverage_estimate,
    dataset_stats,
    load_dataset,
    save_dataset,
)

# queries-per-ground-truth-count histogram used by the stats fixture:
# 1020 queries, 4624 ground truths, max 21, strict mode at 2
GT_HISTOGRAM = {1: 195, 2: 240, 3: 134, 4: 102, 5: 76, 6: 58, 7: 43, 8: 33, 9: 25,
                10: 18, 11: 14, 12: 10, 13: 8, 14: 6, 15: 4, 16: 3, 17: 50, 21: 1}


def make_circo_query(i, gt_count=2, split=None):
    aspects = (SEMANTIC_ASPECTS[i % len(SEMANTIC_ASPECTS)],)
    return CIRCOQuery(
        id=f"q{i:04d}",
        reference_img_id=f"ref{i:04d}",
        relative_caption=f"shows subject number {i} from closer up",
        shared_concept=f"a scene {i}",
        gt_img_ids=tuple(f"gt{i:04d}_{j}" for j in range(gt_count)),
        semantic_aspects=aspects,
        split=split,
    )


@pytest.fixture()
def big_circo():
    queries = []
    i = 0
    for count, n_queries in sorted(GT_HISTOGRAM.items()):
        for _ in range(n_queries):
            queries.append(make_circo_query(i, gt_count=count))
            i += 1
    return CIRCODataset(queries)


class TestCircoSchema:
    def test_reference_cannot_be_ground_truth(self):
        with pytest.raises(InputError):
            CIRCOQuery(id="q", reference_img_id="same", relative_caption="c", shared_concept="s",
                       gt_img_ids=("same", "other"))

    def test_unknown_aspect(self):
        with pytest.raises(InputError):
            CIRCOQuery(id="q", reference_img_id="r", relative_caption="c", shared_concept="s",
                       gt_img_ids=("g",), semantic_aspects=("Vibes",))

    def test_duplicate_gts(self):
        with pytest.raises(InputError):
            CIRCOQuery(id="q", reference_img_id="r", relative_caption="c", shared_concept="s",
                       gt_img_ids=("g", "g"))

    def test_bad_split(self):
        with pytest.raises(InputError):
            make_circo_query(0, split="train")

    def test_all_nine_aspects_accepted(self):
        assert len(SEMANTIC_ASPECTS) == 9
        query = CIRCOQuery(id="q", reference_img_id="r", relative_caption="c", shared_concept="s",
                           gt_img_ids=("g",), semantic_aspects=SEMANTIC_ASPECTS)
        assert query.semantic_aspects == SEMANTIC_ASPECTS


class TestCircoLoading:
    def test_validation_split_fixture(self, tmp_path):
        queries = [make_circo_query(i, split="val") for i in range(220)]
        path = tmp_path / "circo_val.json"
        save_dataset(CIRCODataset(queries), path)
        loaded = load_dataset(path, "circo")
        assert len(loaded) == 220
        assert len(loaded.subset("val")) == 220

    def test_rejection_pinpoints_record(self, tmp_path):
        records = [make_circo_query(0).to_record(), make_circo_query(1).to_record()]
        records[1]["gt_img_ids"] = [records[1]["reference_img_id"]]
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(records))
        with pytest.raises(DatasetValidationError, match="record 1"):
            load_dataset(path, "circo")

    def test_unknown_aspect_rejected_on_load(self, tmp_path):
        record = make_circo_query(0).to_record()
        record["semantic_aspects"] = ["Moodiness"]
        path = tmp_path / "bad.json"
        path.write_text(json.dumps([record]))
        with pytest.raises(DatasetValidationError, match="record 0"):
            load_dataset(path, "circo")

    def test_missing_field_named(self, tmp_path):
        record = make_circo_query(0).to_record()
        del record["shared_concept"]
        path = tmp_path / "bad.json"
        path.write_text(json.dumps([record]))
        with pytest.raises(DatasetValidationError, match="shared_concept"):
            load_dataset(path, "circo")

    def test_duplicate_query_ids(self, tmp_path):
        records = [make_circo_query(0).to_record(), make_circo_query(0).to_record()]
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(records))
        with pytest.raises(DatasetValidationError):
            load_dataset(path, "circo")

    def test_not_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{]")
        with pytest.raises(FormatError):
            load_dataset(path, "circo")

    def test_save_load_save_is_byte_stable(self, tmp_path):
        queries = [make_circo_query(i, gt_count=1 + i % 3, split="test") for i in range(10)]
        first = tmp_path / "a.json"
        second = tmp_path / "b.json"
        save_dataset(CIRCODataset(queries), first)
        save_dataset(load_dataset(first, "circo"), second)
        assert first.read_bytes() == second.read_bytes()


class TestCirrLoading:
    def test_canonical_layout(self, tmp_path):
        triplet = CIRRTriplet(id="p1", reference_img_id="r", target_img_id="t",
                              relative_caption="swap the sky",
                              subset_ids=("r", "t", "a", "b", "c", "d"))
        path = tmp_path / "cirr.json"
        path.write_text(json.dumps([triplet.to_record()]))
        loaded = load_dataset(path, "cirr")
        assert len(loaded) == 1
        judgment = loaded.judgments()[0]
        assert judgment.subset_ids == frozenset({"r", "t", "a", "b", "c", "d"})

    def test_release_layout_adapter(self, tmp_path):
        record = {"pairid": 7, "reference": "r", "target_hard": "t", "caption": "more trees",
                  "img_set": {"members": ["r", "t", "a", "b", "c", "d"]}}
        path = tmp_path / "cap.json"
        path.write_text(json.dumps([record]))
        loaded = load_dataset(path, "cirr")
        assert loaded.triplets[0].id == "7"
        assert loaded.triplets[0].target_img_id == "t"

    def test_subset_size_enforced(self, tmp_path):
        record = {"reference_img_id": "r", "target_img_id": "t", "relative_caption": "c",
                  "subset_ids": ["r", "t", "a"]}
        path = tmp_path / "cirr.json"
        path.write_text(json.dumps([record]))
        with pytest.raises(DatasetValidationError, match="record 0"):
            load_dataset(path, "cirr")

    def test_target_must_be_in_subset(self):
        with pytest.raises(InputError):
            CIRRTriplet(reference_img_id="r", target_img_id="t", relative_caption="c",
                        subset_ids=("r", "x", "a", "b", "c", "d"))


class TestFashionIQLoading:
    def test_canonical_layout(self, tmp_path):
        triplet = FashionIQTriplet(id="f1", reference_img_id="r", target_img_id="t",
                                   captions=("is red", "has sleeves"), category="dress")
        path = tmp_path / "fiq.json"
        path.write_text(json.dumps([triplet.to_record()]))
        loaded = load_dataset(path, "fashioniq")
        assert loaded.triplets[0].category == "dress"

    def test_release_layout_with_filename_category(self, tmp_path):
        record = {"candidate": "r", "target": "t", "captions": ["is red", "is long"]}
        path = tmp_path / "cap.toptee.val.json"
        path.write_text(json.dumps([record]))
        loaded = load_dataset(path, "fashioniq")
        assert loaded.triplets[0].category == "toptee"

    def test_release_layout_without_category_fails(self, tmp_path):
        record = {"candidate": "r", "target": "t", "captions": ["a", "b"]}
        path = tmp_path / "mystery.json"
        path.write_text(json.dumps([record]))
        with pytest.raises(DatasetValidationError):
            load_dataset(path, "fashioniq")

    def test_exactly_two_captions(self):
        with pytest.raises(InputError):
            FashionIQTriplet(reference_img_id="r", target_img_id="t", captions=("only one",), category="shirt")

    def test_judgments_by_category(self, tmp_path):
        triplets = [
            FashionIQTriplet(id=f"s{i}", reference_img_id=f"r{i}", target_img_id=f"t{i}",
                             captions=("a", "b"), category=c)
            for i, c in enumerate(["shirt", "shirt", "dress"])
        ]
        from ticir import FashionIQDataset

        grouped = FashionIQDataset(triplets).judgments_by_category()
        assert {k: len(v) for k, v in grouped.items()} == {"shirt": 2, "dress": 1}


class TestCoverageEstimate:
    def test_reported_numbers(self):
        estimate = coverage_estimate(4097, 4624, 0.8215)
        assert estimate.estimated_total == pytest.approx(4987, abs=1)
        assert estimate.coverage_fraction == pytest.approx(0.927, abs=0.001)

    def test_full_recall_full_coverage(self):
        estimate = coverage_estimate(100, 100, 1.0)
        assert estimate.estimated_total == 100
        assert estimate.coverage_fraction == 1.0

    def test_half_recall(self):
        estimate = coverage_estimate(100, 100, 0.5)
        assert estimate.estimated_total == 200
        assert estimate.coverage_fraction == 0.5

    def test_zero_recall_rejected(self):
        with pytest.raises(InputError):
            coverage_estimate(100, 100, 0.0)

    def test_nonpositive_counts_rejected(self):
        with pytest.raises(InputError):
            coverage_estimate(0, 10, 0.5)

    def test_implausible_coverage_rejected(self):
        with pytest.raises(InputError):
            coverage_estimate(10, 1000, 1.0)


class TestStats:
    def test_big_fixture_aggregates(self, big_circo):
        stats = dataset_stats(big_circo)
        assert stats.query_count == 1020
        assert stats.gt_mean == pytest.approx(4624 / 1020)
        assert round(stats.gt_mean, 2) == 4.53
        assert stats.gt_max == 21
        assert stats.gt_mode == 2

    def test_single_query_mean(self):
        dataset = CIRCODataset([make_circo_query(0, gt_count=3)])
        assert dataset_stats(dataset).gt_mean == 3.0

    def test_aspect_percentages_multilabel(self):
        queries = [
            CIRCOQuery(id=f"q{i}", reference_img_id=f"r{i}", relative_caption="two words",
                       shared_concept="s", gt_img_ids=(f"g{i}",),
                       semantic_aspects=("Cardinality", "Negation") if i == 0 else ("Cardinality",))
            for i in range(2)
        ]
        stats = dataset_stats(CIRCODataset(queries))
        assert stats.aspect_coverage["Cardinality"] == 100.0
        assert stats.aspect_coverage["Negation"] == 50.0
        assert sum(stats.aspect_coverage.values()) > 100.0  # multi-label, unconstrained

    def test_caption_length(self):
        dataset = CIRCODataset([
            CIRCOQuery(id="a", reference_img_id="r1", relative_caption="three word caption",
                       shared_concept="s", gt_img_ids=("g1",)),
            CIRCOQuery(id="b", reference_img_id="r2", relative_caption="five words are in here",
                       shared_concept="s", gt_img_ids=("g2",)),
        ])
        assert dataset_stats(dataset).mean_caption_words == 4.0

    def test_mode_tie_breaks_to_smaller(self):
        queries = [make_circo_query(i, gt_count=c) for i, c in enumerate([1, 1, 3, 3, 5])]
        assert dataset_stats(CIRCODataset(queries)).gt_mode == 1
