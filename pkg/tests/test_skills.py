import pytest
from hypothesis import given
from hypothesis import strategies as st

from navworld.skills import (BUILTIN_SKILLS, PROMOTION_WINDOW, FailureSignature, RegistryError, SkillDoc,
                             SkillFormatError, author_skill, load_registry, parse_skill, parse_version)

DOC = """---
name: plaza-benches
version: 1.2
tags: [plaza, street_furniture]
dependencies: [street-furniture]
owner: someone
---
## Summary
Benches around a plaza.
## Usage
Place four benches.
"""


def test_builtins_always_present(tmp_path):
    idx = load_registry(tmp_path)
    assert set(BUILTIN_SKILLS) <= set(idx.docs)
    assert idx.diagnostics == []


def test_parse_render_roundtrip_keeps_unknown_keys():
    doc = parse_skill(DOC)
    assert doc.name == "plaza-benches" and doc.version == "1.2"
    assert doc.tags == ("plaza", "street_furniture")
    assert doc.extra == (("owner", "owner: someone"),)
    assert doc.section("Usage") == "Place four benches."
    assert parse_skill(doc.render()) == doc


@given(st.lists(st.integers(0, 30), min_size=1, max_size=4), st.lists(st.integers(0, 30), min_size=1, max_size=4))
def test_version_order_is_numeric(a, b):
    va, vb = ".".join(map(str, a)), ".".join(map(str, b))
    assert (parse_version(va) < parse_version(vb)) == (tuple(a) < tuple(b))


@pytest.mark.parametrize("text", ["no front matter", "---\nname: x\n", "---\nversion: 1\n---\n",
                                  "---\nname: x\nversion: one\n---\n", "---\n- a\n- b\n---\n"])
def test_malformed_docs_rejected(text):
    with pytest.raises(SkillFormatError):
        parse_skill(text)


def test_bad_files_become_diagnostics(tmp_path):
    (tmp_path / "broken.md").write_text("oops")
    (tmp_path / "orphan.md").write_text("---\nname: orphan\ndependencies: [missing]\n---\n")
    (tmp_path / "good.md").write_text(DOC)
    idx = load_registry(tmp_path)
    assert "plaza-benches" in idx and "orphan" not in idx
    assert len(idx.diagnostics) == 2


def test_register_requires_strictly_newer_version(tmp_path):
    idx = load_registry(tmp_path)
    idx.register(parse_skill(DOC))
    with pytest.raises(RegistryError):
        idx.register(parse_skill(DOC))
    newer = parse_skill(DOC.replace("version: 1.2", "version: 1.10"))
    assert idx.register(newer).version == "1.10"
    assert load_registry(tmp_path).get("plaza-benches").version == "1.10"
    with pytest.raises(RegistryError):
        idx.register(SkillDoc("needs-ghost", dependencies=("ghost",)))


def test_builtin_override_by_higher_version(tmp_path):
    idx = load_registry(tmp_path)
    base = idx.get("city-layout")
    idx.register(SkillDoc("city-layout", version=base.version + ".1", tags=base.tags, body="override\n"))
    again = load_registry(tmp_path)
    assert again.get("city-layout").body == "override\n" and not again.get("city-layout").builtin


def test_retrieve_ranks_by_tag_overlap_then_name(tmp_path):
    idx = load_registry(tmp_path)
    idx.register(SkillDoc("b-skill", tags=("plaza", "trees")))
    idx.register(SkillDoc("a-skill", tags=("plaza", "trees")))
    idx.register(SkillDoc("c-skill", tags=("plaza",)))
    got = [d.name for d in idx.retrieve(["PLAZA", "trees"], k=3)]
    assert got == ["a-skill", "b-skill", "c-skill"]
    assert idx.retrieve([], k=3) == []
    with pytest.raises(ValueError):
        idx.retrieve(["plaza"], k=0)


def test_promotion_needs_two_occurrences_in_window(tmp_path):
    idx = load_registry(tmp_path)
    sig = FailureSignature.of("COL", "  Building   Tree ")
    assert sig.key == "col::building tree"
    idx.record_failure(sig, 0)
    assert not idx.should_promote(sig)
    idx.record_failure(sig, PROMOTION_WINDOW)  # outside the window of the first
    assert not idx.should_promote(sig)
    idx.record_failure(sig, PROMOTION_WINDOW + 3)
    assert idx.should_promote(sig)
    doc = author_skill(sig, [{"tool": "delete_actor", "args": {"name": "x"}}], PROMOTION_WINDOW + 3)
    idx.register(doc, (sig, PROMOTION_WINDOW + 3))
    assert not idx.should_promote(sig)
    reloaded = load_registry(tmp_path)
    assert reloaded.is_promoted(sig) and reloaded.failures == idx.failures
    with pytest.raises(ValueError):
        idx.record_failure(sig, 1)
