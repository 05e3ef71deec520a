"""Shipped catalog pinned against the transcribed tables, plus schema validation."""

import json
from pathlib import Path

import pytest

from plcfuzz.catalog import CatalogError, default_catalog, default_catalog_text, load_catalog, parse_catalog
from plcfuzz.tags import leaf, node

SNAPSHOT = json.loads((Path(__file__).parent / "data" / "table_snapshot.json").read_text())


@pytest.fixture(scope="module")
def catalog():
    return default_catalog()


def test_counts(catalog):
    assert len(catalog.components) == 20
    assert len(catalog.statuses) == 55


def test_statuses_match_snapshot(catalog):
    expected = {s["code"]: s["name"] for s in SNAPSHOT["statuses"]}
    assert catalog.statuses == expected


def test_components_match_snapshot(catalog):
    by_name = {c.name: c for c in catalog.components.values()}
    for entry in SNAPSHOT["components"]:
        comp = by_name[entry["name"]]
        # CmpDevice is listed with 0x10 in the component table but routed as 0x01
        assert (comp.table3_group or comp.group) == entry["group"]


@pytest.mark.parametrize("entry", SNAPSHOT["commands"], ids=lambda e: f"{e['component']}.{e['name']}")
def test_commands_match_snapshot(catalog, entry):
    spec = catalog.command(entry["group"], entry["id"])
    assert spec is not None
    assert spec.name == entry["name"]
    assert spec.component == entry["component"]
    assert spec.bold == entry["bold"]
    assert set(spec.stages) == set(entry["stages"])


def test_bold_commands_covered(catalog):
    bold = {(e["group"], e["id"]) for e in SNAPSHOT["commands"] if e["bold"]}
    assert bold <= {c.key for c in catalog.bold_commands()}


def test_key_routes(catalog):
    assert catalog.command(0x0F, 0x0D).name == "RecordAdd"
    assert catalog.command(0x06, 0x02).component == "CmpSettings"
    assert catalog.status_name(0x300) == "L7TagMissing"
    assert catalog.interp_name(0x08) is not None and catalog.interp_name(0x05) is not None


def test_load_from_path(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text(default_catalog_text())
    assert load_catalog(path).statuses == default_catalog().statuses


def test_duplicate_status_code_rejected():
    text = default_catalog_text().replace('code = 0x0001\nname = "Failed"', 'code = 0x0000\nname = "Failed"')
    with pytest.raises(CatalogError) as exc:
        parse_catalog(text)
    assert "duplicate status code" in str(exc.value)
    assert exc.value.line == text.splitlines().index('name = "Failed"') - 1  # the entry header line


def test_missing_default_branch_rejected():
    text = default_catalog_text().replace('tree = [{ default = "Ok" }]', 'tree = [{ when = "exists(0x10)", status = "Ok" }]', 1)
    with pytest.raises(CatalogError) as exc:
        parse_catalog(text)
    assert "default" in str(exc.value) and exc.value.line is not None


def test_unknown_status_reference_rejected():
    text = default_catalog_text().replace('tree = [{ default = "Ok" }]', 'tree = [{ default = "Nope" }]', 1)
    with pytest.raises(CatalogError):
        parse_catalog(text)


def test_toml_syntax_error_has_line():
    with pytest.raises(CatalogError) as exc:
        parse_catalog("[meta]\nversion = = 1\n")
    assert exc.value.line == 2


def test_decision_tree_predicates(catalog):
    spec = catalog.command(0x0F, 0x0D)
    assert spec.tree[-1][0] is None
    # a tree always yields a status
    assert spec.decide([node(0x81, leaf(0x40, b"\x00\x00\x00\x00"))]) in catalog.statuses
