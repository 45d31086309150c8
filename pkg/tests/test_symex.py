import itertools

import pytest
from hypothesis import given, strategies as st

from sgxspec import asm, machine, symex
from sgxspec.symex import conc, mk, sym

U64 = st.integers(min_value=0, max_value=(1 << 64) - 1)


# ---------------------------------------------------------------------------
# value construction and folding

@given(U64, U64, st.sampled_from(["add", "sub", "and", "or", "xor", "shl"]))
def test_constant_folds_match_concrete_machine(a, b, op):
    """Folding two constants must agree with the concrete interpreter."""
    listing = asm.parse_listing(f"1000: {op} %rbx,%rax\n")
    stt = machine.CPUState()
    stt.regs["rax"] = a
    stt.regs["rbx"] = b
    stt.rip = 0x1000
    machine.Machine(listing).execute(stt, machine.Memory())
    folded = mk(op, conc(a), conc(b))
    assert folded == conc(stt.regs["rax"])


def test_identity_folds():
    x = sym("rsi")
    assert mk("xor", x, x) == conc(0)
    assert mk("sub", x, x) == conc(0)
    assert mk("add", x, conc(0)) == x
    assert mk("or", conc(0), x) == x
    assert mk("mul", x, conc(1)) == x
    assert mk("mul", x, conc(0)) == conc(0)
    assert mk("and", x, conc(0)) == conc(0)
    assert mk("shl", x, conc(0)) == x


def test_ext_folds():
    x = sym("rdi")
    assert mk("ext", conc(0x1_2345_6789), 32) == conc(0x2345_6789)
    assert mk("ext", x, 64) == x
    assert mk("ext", mk("ext", x, 16), 32) == mk("ext", x, 16)
    # values shifted entirely above the extracted width vanish
    assert mk("ext", mk("shl", x, conc(32)), 32) == conc(0)


def test_pinned_selector_fold():
    """or(high-half symbol, small constant) keeps a concrete 32-bit view."""
    composite = mk("or", mk("shl", sym("rdi"), conc(32)), conc(5))
    assert mk("ext", composite, 32) == conc(5)
    assert symex.origins_in(composite) == {"rdi"}


def test_sext_fold():
    assert mk("sext", conc(0x8000_0000), 32) == conc(0xFFFF_FFFF_8000_0000)
    assert mk("sext", conc(0x7FFF_FFFF), 32) == conc(0x7FFF_FFFF)


def test_origin_tracking_through_loads():
    addr = mk("add", sym("rsi"), conc(8))
    loaded = mk("load", addr, 8, 1)
    assert symex.origins_in(loaded, through_loads=True) == {"rsi"}
    assert symex.origins_in(loaded, through_loads=False) == set()
    assert symex.depends_on(loaded, "rsi", through_loads=True)
    assert not symex.depends_on(loaded, "rsi", through_loads=False)


def test_contains_term():
    t = mk("load", sym("rdx"), 4, 7)
    v = mk("add", mk("mul", t, conc(8)), sym("rbx"))
    assert symex.contains_term(v, t)
    assert not symex.contains_term(sym("rbx"), t)


def test_condition_evaluator_matches_machine():
    conds = ["e", "ne", "z", "nz", "a", "ae", "b", "be", "g", "ge",
             "l", "le", "s", "ns", "c", "nc", "o", "no"]
    for zf, cf, sf, of in itertools.product((False, True), repeat=4):
        stt = machine.CPUState(zf=zf, cf=cf, sf=sf, of=of)
        for cond in conds:
            assert symex.evaluate_condition(cond, zf, cf, sf, of) == \
                machine.cond_true(cond, stt), (cond, zf, cf, sf, of)


# ---------------------------------------------------------------------------
# configuration

def test_entry_model_from_mapping():
    em = symex.EntryModel.from_mapping({
        "entry-symbol": "start", "selector-register": "ecx",
        "ecall-selector": "0x7", "attacker-registers": "rsi, rdx"})
    assert em.entry_symbol == "start"
    assert em.selector_register == "ecx"
    assert em.ecall_selector == 7
    assert em.attacker_registers == frozenset({"rsi", "rdx"})


def test_exploration_config_bounds():
    with pytest.raises(ValueError):
        symex.ExplorationConfig(max_steps=0)
    cfg = symex.ExplorationConfig.from_mapping({"loop-bound": "4"})
    assert cfg.loop_bound == 4


# ---------------------------------------------------------------------------
# engine behaviour on small listings

def small_engine(text, **em_kw):
    listing = asm.parse_listing(text)
    em = symex.EntryModel(**em_kw)
    return symex.Engine(listing, em), em


def test_init_state_pins_selector():
    eng, _ = small_engine(
        "0000000000001000 <enclave_entry>:\n1000: retq\n"
        "0000000000001008 <sgx_ocall>:\n1008: retq\n")
    st = eng.init_state(mode=symex.ECALL)
    assert mk("ext", st.regs["rdi"], 32) == conc(0)
    st = eng.init_state(mode=symex.ORET)
    assert mk("ext", st.regs["rdi"], 32) == conc(0xFFFF_FFFF)
    assert st.regs["rsp"] == conc(symex.STACK_TOP)
    assert st.regs["rax"] == conc(0)


def test_missing_entry_symbol_raises():
    eng, _ = small_engine("0000000000001000 <other>:\n1000: retq\n")
    with pytest.raises(asm.SymbolError):
        eng.init_state()


def test_taint_propagates_through_arithmetic():
    eng, _ = small_engine(
        "0000000000001000 <enclave_entry>:\n"
        "1000: mov %rsi,%rax\n"
        "1008: add %r8,%rax\n"
        "1010: retq\n")
    st = eng.init_state()
    eng.step(st)
    eng.step(st)
    assert symex.origins_in(st.regs["rax"]) == {"rsi", "r8"}


def test_xor_self_clears_taint():
    eng, _ = small_engine(
        "0000000000001000 <enclave_entry>:\n"
        "1000: xor %rsi,%rsi\n"
        "1001: retq\n")
    st = eng.init_state()
    eng.step(st)
    assert st.regs["rsi"] == conc(0)


def test_symbolic_flags_fork_both_ways():
    eng, _ = small_engine(
        "0000000000001000 <enclave_entry>:\n"
        "1000: test %rsi,%rsi\n"
        "1003: je 1010\n"
        "1005: mov $0x1,%rax\n"
        "100c: retq\n"
        "1010: mov $0x2,%rax\n"
        "1017: retq\n")
    seen = []
    eng.explore(visitor=lambda st, ins: seen.append((ins.address, st.trail[-1])))
    addrs = {a for a, _ in seen}
    assert addrs == {0x100C, 0x1017}
    takens = {t for _, (_, t) in seen}
    assert takens == {True, False}


def test_loop_bound_caps_exploration():
    eng, _ = small_engine(
        "0000000000001000 <enclave_entry>:\n"
        "1000: test %rsi,%rsi\n"
        "1003: je 1000\n"
        "1005: retq\n")
    summary = eng.explore(visitor=lambda st, ins: None)
    assert summary.visits >= 1
    assert not summary.capped
