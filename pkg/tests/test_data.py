import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msda.data import (
    DatasetBundle,
    Example,
    ParseError,
    ValidationError,
    holdout,
    load_canonical,
    train_val_split,
    write_canonical,
)
from msda.synth import synthetic_bundle

from conftest import make_bundle, make_example


class TestExample:
    def test_blank_text_rejected(self):
        with pytest.raises(ValidationError):
            Example(id="x", text="   \n", domain="a", label=1)

    def test_bad_label_rejected(self):
        with pytest.raises(ValidationError):
            Example(id="x", text="ok", domain="a", label=2)

    def test_without_label(self):
        ex = make_example(0, "a", label=1)
        assert ex.without_label().label is None
        assert ex.without_label().id == ex.id


class TestBundleValidation:
    def test_source_examples_must_be_labelled(self):
        with pytest.raises(ValidationError):
            DatasetBundle(sources={"a": (make_example(0, "a"),), "b": (make_example(0, "b", 1),)})

    def test_domain_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            DatasetBundle(sources={"a": (make_example(0, "b", label=1),)})

    def test_duplicate_id_across_domains_rejected(self):
        ex = make_example(0, "a", label=1)
        with pytest.raises(ValidationError):
            DatasetBundle(
                sources={
                    "a": (ex,),
                    "b": (Example(id=ex.id, text="other", domain="b", label=0),),
                }
            )

    def test_labelled_target_pool_rejected(self):
        with pytest.raises(ValidationError):
            DatasetBundle(
                sources={"a": (make_example(0, "a", 1),), "b": (make_example(0, "b", 0),)},
                target_unlabelled=(make_example(9, "c", label=1),),
            )

    def test_domain_index_is_sorted_rank(self):
        bundle = make_bundle(domains=("kitchen", "books", "dvd"))
        assert bundle.domain_index() == {"books": 0, "dvd": 1, "kitchen": 2}
        assert bundle.domains == ("books", "dvd", "kitchen")

    def test_training_view_drops_target_test(self):
        view = holdout(make_bundle(domains=("a", "b", "c")), "c").training_view()
        assert view.target_test == ()
        assert all(ex.label is None for ex in view.target_unlabelled)


class TestCanonicalIO:
    def test_paper_scale_layout_loads(self, tmp_path):
        # Four domains of 2,000 labelled examples each (1,000 per class).
        bundle = synthetic_bundle(
            domains=("books", "dvd", "electronics", "kitchen"), examples_per_domain=2000
        )
        write_canonical(bundle, tmp_path)
        loaded = load_canonical(tmp_path)
        assert loaded.num_sources == 4
        for domain in loaded.domains:
            examples = loaded.sources[domain]
            assert len(examples) == 2000
            assert sum(ex.label for ex in examples) == 1000

    def test_round_trip_field_by_field(self, tmp_path):
        bundle = holdout(make_bundle(domains=("a", "b", "c"), per_domain=5), "c")
        write_canonical(bundle, tmp_path)
        assert load_canonical(tmp_path) == bundle

    def test_round_trip_preserves_unlabelled_pools(self, tmp_path):
        base = make_bundle(domains=("a", "b"))
        bundle = DatasetBundle(
            sources=base.sources,
            unlabelled_pools={"a": (make_example(99, "a"),)},
        )
        write_canonical(bundle, tmp_path)
        assert load_canonical(tmp_path) == bundle

    def test_empty_directory_rejected(self, tmp_path):
        with pytest.raises(ValidationError):
            load_canonical(tmp_path)

    def test_missing_text_is_parse_error_with_line(self, tmp_path):
        path = tmp_path / "a.jsonl"
        lines = [
            json.dumps({"id": "a-0", "text": "fine", "label": 1, "domain": "a"}),
            json.dumps({"id": "a-1", "label": 0, "domain": "a"}),
        ]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ParseError) as err:
            load_canonical(tmp_path)
        assert "a.jsonl:2" in str(err.value)
        assert "text" in str(err.value)

    def test_invalid_json_names_file_and_line(self, tmp_path):
        (tmp_path / "a.jsonl").write_text('{"id": "a-0", "text": "x", "label": 1, "domain": "a"}\n{oops\n')
        with pytest.raises(ParseError) as err:
            load_canonical(tmp_path)
        assert "a.jsonl:2" in str(err.value)

    def test_unknown_key_rejected(self, tmp_path):
        (tmp_path / "a.jsonl").write_text(
            json.dumps({"id": "a-0", "text": "x", "label": 1, "domain": "a", "lable": 1}) + "\n"
        )
        with pytest.raises(ParseError) as err:
            load_canonical(tmp_path)
        assert "lable" in str(err.value)

    def test_duplicate_id_rejected(self, tmp_path):
        row = {"id": "dup", "text": "x", "label": 1, "domain": "a"}
        (tmp_path / "a.jsonl").write_text(json.dumps(row) + "\n" + json.dumps(row) + "\n")
        (tmp_path / "b.jsonl").write_text(
            json.dumps({"id": "b-0", "text": "y", "label": 0, "domain": "b"}) + "\n"
        )
        with pytest.raises(ValidationError) as err:
            load_canonical(tmp_path)
        assert "dup" in str(err.value)

    def test_fewer_than_two_source_domains_rejected(self, tmp_path):
        (tmp_path / "a.jsonl").write_text(
            json.dumps({"id": "a-0", "text": "x", "label": 1, "domain": "a"}) + "\n"
        )
        with pytest.raises(ValidationError) as err:
            load_canonical(tmp_path)
        assert "2" in str(err.value)

    def test_domain_field_must_match_filename(self, tmp_path):
        (tmp_path / "a.jsonl").write_text(
            json.dumps({"id": "x", "text": "x", "label": 1, "domain": "b"}) + "\n"
        )
        with pytest.raises(ValidationError):
            load_canonical(tmp_path)

    def test_deterministic_bytes_on_rewrite(self, tmp_path):
        bundle = make_bundle(domains=("a", "b"))
        write_canonical(bundle, tmp_path / "one")
        write_canonical(bundle, tmp_path / "two")
        for name in ("a.jsonl", "b.jsonl"):
            assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()


class TestHoldout:
    def test_holdout_strips_labels_and_keeps_test(self):
        bundle = make_bundle(domains=("a", "b", "c"), per_domain=4)
        view = holdout(bundle, "b")
        assert view.domains == ("a", "c")
        assert len(view.target_unlabelled) == 4
        assert all(ex.label is None for ex in view.target_unlabelled)
        assert [ex.label for ex in view.target_test] == [0, 1, 0, 1]
        assert [ex.id for ex in view.target_unlabelled] == [ex.id for ex in view.target_test]

    def test_unknown_domain_rejected(self):
        with pytest.raises(ValidationError):
            holdout(make_bundle(), "nope")


class TestTrainValSplit:
    def test_split_is_stratified_and_seeded(self):
        bundle = make_bundle(domains=("a", "b"), per_domain=20)
        train1, val1 = train_val_split(bundle, fraction=0.1, seed=7)
        train2, val2 = train_val_split(bundle, fraction=0.1, seed=7)
        assert val1 == val2
        assert train1 == train2
        assert len(val1) == 4  # 10% of each (domain, label) group
        for domain in bundle.domains:
            group = [ex for ex in val1 if ex.domain == domain]
            assert sum(ex.label for ex in group) == len(group) // 2
        train_ids = {ex.id for d in train1.domains for ex in train1.sources[d]}
        assert train_ids.isdisjoint({ex.id for ex in val1})

    def test_different_seed_changes_selection(self):
        bundle = make_bundle(domains=("a", "b"), per_domain=20)
        _, val1 = train_val_split(bundle, seed=0)
        _, val2 = train_val_split(bundle, seed=1)
        assert {e.id for e in val1} != {e.id for e in val2}


@settings(max_examples=25, deadline=None)
@given(names=st.lists(st.text(alphabet="abcdefgh", min_size=1, max_size=6), min_size=2, max_size=5, unique=True))
def test_domain_index_depends_only_on_sorted_names(names):
    sources = {
        name: (Example(id=f"{name}-0", text="hello world", domain=name, label=1),)
        for name in names
    }
    bundle = DatasetBundle(sources=sources)
    expected = {name: rank for rank, name in enumerate(sorted(names))}
    assert bundle.domain_index() == expected
