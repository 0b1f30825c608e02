import json

import pytest

from hierarchical_cxr.core.errors import TaxonomyError
from hierarchical_cxr.core.taxonomy import (
    Taxonomy,
    TaxonomyNode,
    parse_taxonomy,
    save_taxonomy,
    validate,
)

from conftest import minimal_document


def test_parse_nested_chain():
    doc = minimal_document()
    doc["trees"]["findings"]["children"] = [
        {"id": "infiltrates", "children": [
            {"id": "interstitial-pattern", "children": [{"id": "ground-glass-pattern"}]},
        ]},
    ]
    t = parse_taxonomy(doc)
    assert len(t) == 6
    assert t.parent("ground-glass-pattern") == "interstitial-pattern"
    assert t.node_ids[:4] == ["findings-root", "infiltrates", "interstitial-pattern", "ground-glass-pattern"]


def test_minimal_forest_has_three_parentless_roots():
    t = parse_taxonomy(minimal_document())
    assert len(t) == 3
    assert all(t.parent(n) is None for n in t.node_ids)
    assert t.leaves() == []


def test_self_parent_is_a_cycle():
    doc = minimal_document(nodes=[{"id": "x", "parent": "x"}])
    with pytest.raises(TaxonomyError, match="cycle detected") as excinfo:
        parse_taxonomy(doc)
    assert excinfo.value.node_id == "x"


def test_longer_cycle_detected():
    doc = minimal_document(nodes=[{"id": "a", "parent": "b"}, {"id": "b", "parent": "a"}])
    with pytest.raises(TaxonomyError, match="cycle detected"):
        parse_taxonomy(doc)


def test_unknown_parent_reported():
    doc = minimal_document(nodes=[{"id": "y", "parent": "ghost"}])
    with pytest.raises(TaxonomyError) as excinfo:
        parse_taxonomy(doc)
    assert excinfo.value.node_id == "y"


def test_empty_document_rejected():
    with pytest.raises(TaxonomyError, match="empty"):
        parse_taxonomy({})


class TestDocumentOrder:

    def test_trees_indexed_in_file_order(self):
        text = (
            '{"trees": {\n'
            ' "diagnoses": {"id": "d", "children": [{"id": "d1"}]},\n'
            ' "findings": {"id": "f"},\n'
            ' "localizations": {"id": "l"}\n'
            '}}\n'
        )
        t = parse_taxonomy(text)
        assert t.node_ids == ["d", "d1", "f", "l"]
        assert t.index_of("f") == 2

    def test_flat_nodes_keep_their_position(self):
        doc = {
            "nodes": [{"id": "early", "parent": "findings-root"}],
            **minimal_document(),
            "special": [{"id": "normal"}],
        }
        t = parse_taxonomy(doc)
        assert t.node_ids == ["early", "findings-root", "differential-diagnosis-root", "localizations-root", "normal"]
        assert t.node("early").tree == "findings"

    def test_special_section_before_trees(self):
        doc = {"special": [{"id": "normal"}], **minimal_document()}
        assert parse_taxonomy(doc).id_of(0) == "normal"

    def test_reordered_document_round_trips(self):
        doc = {
            "nodes": [{"id": "late-child", "parent": "findings-root"}],
            "special": [{"id": "normal"}],
            "trees": {
                "localizations": {"id": "l"},
                "findings": {"id": "findings-root", "children": [{"id": "a"}]},
                "diagnoses": {"id": "d"},
            },
        }
        t = parse_taxonomy(doc)
        again = parse_taxonomy(t.serialize())
        assert again.node_ids == t.node_ids == ["late-child", "normal", "l", "findings-root", "a", "d"]
        assert again.checksum() == t.checksum()
        assert "trees" not in t.serialize()

    def test_flat_root_with_unknown_tree(self):
        with pytest.raises(TaxonomyError):
            parse_taxonomy({"nodes": [{"id": "x", "tree": "organs"}]})


def test_duplicate_id_reports_line():
    text = (
        '{\n'
        ' "trees": {\n'
        '  "findings": {"id": "findings-root", "children": [\n'
        '   {"id": "a"},\n'
        '   {"id": "a"}\n'
        '  ]},\n'
        '  "diagnoses": {"id": "d"},\n'
        '  "localizations": {"id": "l"}\n'
        ' }\n'
        '}\n'
    )
    with pytest.raises(TaxonomyError) as excinfo:
        parse_taxonomy(text)
    assert excinfo.value.node_id == "a"
    assert excinfo.value.line == 5
    assert "line 5" in str(excinfo.value)


def test_special_labels_cannot_have_children():
    doc = minimal_document(special=[{"id": "normal", "children": [{"id": "very-normal"}]}])
    with pytest.raises(TaxonomyError):
        parse_taxonomy(doc)


def test_missing_tree_rejected():
    doc = minimal_document()
    del doc["trees"]["localizations"]
    with pytest.raises(TaxonomyError, match="localizations"):
        parse_taxonomy(doc)


def test_flat_nodes_resolve_tree_from_parent():
    doc = minimal_document(nodes=[
        {"id": "pneumonia", "parent": "differential-diagnosis-root"},
        {"id": "viral-pneumonia", "parent": "pneumonia"},
    ])
    t = parse_taxonomy(doc)
    assert t.node("viral-pneumonia").tree == "diagnoses"
    assert t.ancestors("viral-pneumonia") == ["pneumonia", "differential-diagnosis-root"]


class TestValidate:

    def test_valid_subtree_has_empty_report(self, covid_taxonomy):
        assert validate(covid_taxonomy) == []

    def test_orphan_entry(self):
        nodes = [
            TaxonomyNode("findings-root", "f", None, "findings"),
            TaxonomyNode("diagnoses-root", "d", None, "diagnoses"),
            TaxonomyNode("localizations-root", "l", None, "localizations"),
            TaxonomyNode("lost", "lost", "nowhere", "findings"),
        ]
        issues = validate(Taxonomy(nodes))
        assert [(i.kind, i.node_id) for i in issues] == [("orphan", "lost")]

    def test_duplicate_entry(self):
        nodes = [
            TaxonomyNode("findings-root", "f", None, "findings"),
            TaxonomyNode("diagnoses-root", "d", None, "diagnoses"),
            TaxonomyNode("localizations-root", "l", None, "localizations"),
            TaxonomyNode("twin", "twin", "findings-root", "findings"),
            TaxonomyNode("twin", "twin again", "findings-root", "findings"),
        ]
        issues = validate(Taxonomy(nodes))
        assert [(i.kind, i.node_id) for i in issues] == [("duplicate-id", "twin")]


class TestTraversal:

    def test_covid_ancestors(self, covid_taxonomy):
        assert covid_taxonomy.ancestors("covid-19") == [
            "viral-pneumonia", "atypical-pneumonia", "pneumonia", "differential-diagnosis-root",
        ]

    def test_root_has_no_ancestors(self, covid_taxonomy):
        assert covid_taxonomy.ancestors("differential-diagnosis-root") == []
        assert covid_taxonomy.ancestors("normal") == []

    def test_ground_glass_ancestors(self, covid_taxonomy):
        assert covid_taxonomy.ancestors("ground-glass-pattern") == [
            "interstitial-pattern", "infiltrates", "findings-root",
        ]

    def test_pneumonia_descendants(self, covid_taxonomy):
        assert covid_taxonomy.descendants("pneumonia") == {
            "atypical-pneumonia", "viral-pneumonia", "covid-19", "covid-19-uncertain",
        }

    def test_leaf_has_no_descendants(self, covid_taxonomy):
        assert covid_taxonomy.descendants("covid-19") == set()

    def test_infiltrates_descendants_match_bfs(self, covid_taxonomy):
        expected, frontier = set(), ["infiltrates"]
        while frontier:
            node = frontier.pop(0)
            for child in covid_taxonomy.children(node):
                expected.add(child)
                frontier.append(child)
        assert covid_taxonomy.descendants("infiltrates") == expected
        assert expected == {
            "interstitial-pattern", "ground-glass-pattern", "reticular-interstitial-pattern",
            "reticulonodular-interstitial-pattern", "miliary-opacities", "alveolar-pattern",
            "consolidation", "air-bronchogram",
        }

    def test_unknown_id_raises(self, covid_taxonomy):
        with pytest.raises(TaxonomyError):
            covid_taxonomy.ancestors("not-a-node")
        with pytest.raises(TaxonomyError):
            covid_taxonomy.descendants("not-a-node")

    def test_ancestor_chain_ends_at_root(self, covid_taxonomy):
        roots = set(covid_taxonomy.roots())
        for node_id in covid_taxonomy.node_ids:
            chain = covid_taxonomy.ancestors(node_id)
            if chain:
                assert chain[-1] in roots

    def test_descendant_ancestor_duality(self, covid_taxonomy):
        ids = covid_taxonomy.node_ids
        for x in ids:
            below = covid_taxonomy.descendants(x)
            for y in ids:
                assert (y in below) == (x in covid_taxonomy.ancestors(y))


class TestIndexAndSerialization:

    def test_index_round_trip(self, covid_taxonomy):
        for i in range(len(covid_taxonomy)):
            assert covid_taxonomy.index_of(covid_taxonomy.id_of(i)) == i

    def test_specials_follow_trees(self, covid_taxonomy):
        assert covid_taxonomy.node_ids[-4:] == ["normal", "exclude", "unchanged", "suboptimal-study"]
        assert len(covid_taxonomy) == 37

    def test_exclude_specials_from_index(self):
        from conftest import TAXONOMY_DIR

        t = parse_taxonomy(TAXONOMY_DIR / "covid_subtree.json", include_special=False)
        assert len(t) == 33
        assert "normal" not in t

    def test_parse_serialize_parse(self, covid_taxonomy):
        again = parse_taxonomy(covid_taxonomy.serialize())
        assert again.node_ids == covid_taxonomy.node_ids
        assert [again.parent(n) for n in again.node_ids] == [covid_taxonomy.parent(n) for n in covid_taxonomy.node_ids]
        assert again.checksum() == covid_taxonomy.checksum()

    def test_save_and_reload(self, covid_taxonomy, tmp_path):
        path = save_taxonomy(covid_taxonomy, tmp_path / "tax.json")
        assert json.loads(path.read_text(encoding="utf-8"))["trees"]["diagnoses"]["id"] == "differential-diagnosis-root"
        assert parse_taxonomy(path).checksum() == covid_taxonomy.checksum()

    def test_checksum_changes_with_structure(self, covid_taxonomy, toy_taxonomy):
        assert covid_taxonomy.checksum() != toy_taxonomy.checksum()

    def test_render_tree_layout(self, covid_taxonomy):
        text = covid_taxonomy.render_tree()
        lines = text.splitlines()
        assert lines[0].startswith("Radiological Findings")
        assert any(line.endswith("├── ground glass pattern") for line in lines)
        assert any("└── " in line and "viral pneumonia" in line for line in lines)
        assert "Special labels" in lines

    def test_toy_taxonomy_shape(self, toy_taxonomy):
        assert len(toy_taxonomy.leaves()) == 8
        assert max(len(toy_taxonomy.ancestors(leaf)) for leaf in toy_taxonomy.leaves()) == 2

    def test_visualize_writes_html(self, toy_taxonomy, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        output = toy_taxonomy.visualize(str(tmp_path / "taxonomy.html"))
        assert (tmp_path / "taxonomy.html").exists()
        assert output.endswith("taxonomy.html")
