import dataclasses

import pytest

from sgxspec import asm, scan, symex
from sgxspec.scan import ScanConfig


def listing_of(text):
    return asm.parse_listing(text)


# ---------------------------------------------------------------------------
# type-I scanning

def test_tainted_ret_is_reported_and_verified():
    listing = listing_of(
        "0000000000001000 <enclave_entry>:\n"
        "1000: mov %rsi,%rdx\n"
        "1003: retq\n")
    em = symex.EntryModel(attacker_registers=frozenset({"rsi"}))
    gadgets, summary = scan.scan_type1(listing, em)
    assert len(gadgets) == 1
    g = gadgets[0]
    assert g.category == "return"
    assert g.location == "enclave_entry:0x3"
    assert set(g.controlled) == {"rsi", "rdx"}
    assert scan.verify_type1(listing, em, g) == {"rsi", "rdx"}
    assert not summary.capped


def test_cleared_registers_are_not_reported():
    listing = listing_of(
        "0000000000001000 <enclave_entry>:\n"
        "1000: xor %rsi,%rsi\n"
        "1003: xor %rdx,%rdx\n"
        "1006: retq\n")
    em = symex.EntryModel(attacker_registers=frozenset({"rsi", "rdx"}))
    gadgets, _ = scan.scan_type1(listing, em)
    assert gadgets == []


def test_value_loaded_through_memory_is_not_direct_control():
    """A register filled by dereferencing attacker data is excluded: its
    value comes from victim memory, not from the attacker's register file."""
    listing = listing_of(
        "0000000000001000 <enclave_entry>:\n"
        "1000: mov (%rsi),%rsi\n"
        "1003: retq\n")
    em = symex.EntryModel(attacker_registers=frozenset({"rsi"}))
    gadgets, _ = scan.scan_type1(listing, em)
    assert gadgets == []


def test_verify_rejects_fabricated_register(sdk_listing):
    em = symex.EntryModel()
    gadgets, _ = scan.scan_type1(sdk_listing, em)
    jump = next(g for g in gadgets if g.category == "indirect-jump")
    assert "r12" not in jump.controlled    # cleared on the dispatch path
    forged = dataclasses.replace(jump, controlled=jump.controlled + ("r12",))
    assert scan.verify_type1(sdk_listing, em, forged) == set(jump.controlled)


def test_sanitized_corpus_is_clean():
    from conftest import corpus_text
    listing = listing_of(corpus_text("sanitized.dis"))
    em = symex.EntryModel()
    for mode in (symex.ECALL, symex.ORET):
        start = em.ocall_symbol if mode == symex.ORET else None
        gadgets, _ = scan.scan_type1(listing, em, mode=mode, start=start)
        assert gadgets == []


def test_score_orders_by_register_count():
    listing = listing_of(
        "0000000000001000 <enclave_entry>:\n"
        "1000: mov %rsi,%rdx\n"
        "1003: retq\n")
    em = symex.EntryModel(attacker_registers=frozenset({"rsi"}))
    (g,), _ = scan.scan_type1(listing, em)
    assert scan.score_type1(g) == 2


# ---------------------------------------------------------------------------
# type-II scanning

DLFREE_SNIPPET = (
    "0000000000005c10 <dlfree>:\n"
    "5c10: nop\n"
    "607f: mov 0x38(%rsi),%edi\n"
    "6082: mov %rdi,%rcx\n"
    "6085: lea (%rbx,%rdi,8),%rdi\n"
    "6089: cmp 0x258(%rdi),%rsi\n"
    "608d: retq\n")


def test_dependent_access_gadget_found():
    gadgets = scan.scan_type2(listing_of(DLFREE_SNIPPET))
    assert len(gadgets) == 1
    g = gadgets[0]
    assert g.location == "dlfree:0x46f"
    assert (g.regA, g.regB, g.regC) == ("rsi", "rdi", "rbx")
    assert g.length == 4
    assert g.triple == "[rsi, rdi, rbx]"


def test_window_must_cover_the_second_access():
    listing = listing_of(DLFREE_SNIPPET)
    assert scan.scan_type2(listing, ScanConfig(window=2)) == []
    assert len(scan.scan_type2(listing, ScanConfig(window=3))) == 1


def test_wider_window_is_a_superset():
    from conftest import corpus_text
    listing = listing_of(corpus_text("dlmalloc_excerpts.dis"))
    small = {g.address for g in scan.scan_type2(listing, ScanConfig(window=5))}
    large = {g.address for g in scan.scan_type2(listing, ScanConfig(window=12))}
    assert small <= large


def test_window_broken_by_control_flow():
    listing = listing_of(
        "0000000000001000 <fn>:\n"
        "1000: mov 0x38(%rsi),%edi\n"
        "1003: jmp 1005\n"
        "1005: cmp 0x258(%rdi),%rsi\n"
        "1009: retq\n")
    assert scan.scan_type2(listing) == []


def test_regC_required_filters():
    listing = listing_of(
        "0000000000001000 <fn>:\n"
        "1000: mov 0x38(%rsi),%edi\n"
        "1003: cmp 0x258(%rdi),%rsi\n"
        "1007: retq\n")
    found = scan.scan_type2(listing)
    assert len(found) == 1 and found[0].regC is None
    assert scan.scan_type2(listing, ScanConfig(regC_required=True)) == []


def test_scanconfig_rejects_bad_window():
    with pytest.raises(ValueError):
        ScanConfig(window=0)


# ---------------------------------------------------------------------------
# reports

def test_structured_report_round_trip(sdk_listing):
    em = symex.EntryModel()
    gadgets, _ = scan.scan_type1(sdk_listing, em)
    text = scan.emit_report(type1=gadgets, format="structured", corpus_id="x")
    doc = scan.parse_report(text)
    assert doc["corpus-id"] == "x"
    assert len(doc["type1"]) == len(gadgets)
    locations = {g.location for g in gadgets}
    assert {row["location"] for row in doc["type1"]} == locations


def test_text_report_has_one_row_per_gadget():
    gadgets = scan.scan_type2(listing_of(DLFREE_SNIPPET))
    text = scan.emit_report(type2=gadgets)
    lines = [l for l in text.splitlines() if l]
    assert lines[0] == "start | registers | length"
    assert lines[1] == "dlfree:0x46f | [rsi, rdi, rbx] | 4"


def test_unknown_report_format():
    with pytest.raises(ValueError):
        scan.emit_report(format="csv")
