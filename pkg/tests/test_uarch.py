import pytest

from sgxspec import asm
from sgxspec.config import CountermeasureConfig, CPUModel, LatencyConfig
from sgxspec.machine import Fault
from sgxspec.uarch import (BTB, LINE, LOW32, RSB, CacheModel, Simulator,
                           TranslationModel, apply_retpoline)


# ---------------------------------------------------------------------------
# branch target buffer

def test_btb_predicts_within_callers_4gb_region():
    btb = BTB()
    btb.update(0x4_0000_1234, 0x5678)
    # any source sharing the low 32 bits hits the same entry, and the
    # predicted target is formed in the fetching code's own region
    assert btb.predict(0x7_0000_1234) == 0x7_0000_5678
    assert btb.predict(0x0000_1234) == 0x5678


def test_btb_is_direct_mapped():
    btb = BTB(index_bits=12)
    src = 0x2118
    btb.update(src, 0x7642)
    assert btb.predict(src) == 0x7642
    # same index, different tag: the second update evicts the first
    btb.update(src + (1 << 12), 0x9999)
    assert btb.predict(src) is None
    assert btb.predict(src + (1 << 12)) == 0x9999


def test_btb_tag_miss_returns_none():
    btb = BTB()
    btb.update(0x1000, 0x2000)
    assert btb.predict(0x1000 + (1 << 13)) is None


def test_stibp_blocks_cross_context_entries():
    btb = BTB()
    btb.update(0x1000, 0x2000, context=1)
    cm = CountermeasureConfig(stibp=True)
    assert btb.predict(0x1000, context=0, cm=cm) is None
    assert btb.predict(0x1000, context=1, cm=cm) == 0x2000
    assert btb.predict(0x1000, context=0) == 0x2000   # without stibp


def test_ibrs_blocks_normal_mode_entries_inside_enclave():
    btb = BTB()
    btb.update(0x1000, 0x2000, mode="normal")
    cm = CountermeasureConfig(ibrs=True)
    assert btb.predict(0x1000, in_enclave=True, cm=cm) is None
    assert btb.predict(0x1000, in_enclave=False, cm=cm) == 0x2000
    btb.update(0x1000, 0x2000, mode="enclave")
    assert btb.predict(0x1000, in_enclave=True, cm=cm) == 0x2000


def test_exact_source_match_filters_aliases():
    btb = BTB()
    btb.update(0x4_0000_1234, 0x5678)
    assert btb.predict(0x7_0000_1234, exact_source=True) is None
    assert btb.predict(0x4_0000_1234, exact_source=True) == 0x4_0000_5678


# ---------------------------------------------------------------------------
# return stack buffer

def test_rsb_is_sixteen_deep_lifo():
    rsb = RSB()
    assert rsb.capacity == 16
    for i in range(16):
        rsb.push(0x1000 + i)
    assert rsb.occupancy == 16
    for i in reversed(range(16)):
        assert rsb.pop() == 0x1000 + i
    assert rsb.pop() is None


def test_rsb_overflow_drops_the_oldest_entry():
    rsb = RSB(entries=16)
    for i in range(17):
        rsb.push(0x1000 + i)
    assert rsb.occupancy == 16
    seen = [rsb.pop() for _ in range(16)]
    assert seen == [0x1000 + i for i in range(16, 0, -1)]
    assert rsb.pop() is None      # entry 0x1000 was overwritten


def test_rsb_refill():
    rsb = RSB()
    rsb.refill(0x3662)
    assert rsb.occupancy == 16
    assert all(rsb.pop() == 0x3662 for _ in range(16))


# ---------------------------------------------------------------------------
# caches and translation

def test_cache_latency_ladder():
    lat = LatencyConfig()
    cache = CacheModel(lat)
    assert cache.probe(0x1000) == lat.memory
    cache.install(0x1000)
    assert cache.probe(0x1000) == lat.l1
    assert cache.level_of(0x1000) == "l1"
    cache.flush(0x1000)
    assert cache.probe(0x1000) == lat.memory


def test_evict_set_removes_the_line_at_every_level():
    cache = CacheModel(LatencyConfig())
    victim = 0x15FFF8
    cache.install(victim)
    cache.install(victim + LINE)          # neighbouring set survives
    cache.evict_set(victim)
    assert cache.level_of(victim) == "memory"
    assert cache.level_of(victim + LINE) == "l1"


def test_translation_ladder_and_reserved_fault():
    lat = LatencyConfig()
    tm = TranslationModel(lat)
    assert tm.probe(0x5000) == (lat.memory_walk, False)
    tm.cache_pte(0x5000)
    assert tm.probe(0x5000) == (lat.cached_walk, False)
    tm.install(0x5000)
    assert tm.probe(0x5000) == (0, False)
    tm.drop_page(0x5000)
    assert tm.probe(0x5000) == (lat.memory_walk, False)
    tm.set_reserved(0x5000, True)
    assert tm.probe(0x5000) == (0, True)
    with pytest.raises(Fault):
        tm.translate(0x5000)
    tm.set_reserved(0x5000, False)
    assert tm.translate(0x5000) == lat.memory_walk


# ---------------------------------------------------------------------------
# simulator behaviour

ENCLAVE_HEADER = (
    ".enclave 0x1000 0x20000\n"
    ".entry enclave_entry\n")


def make_sim(body, **kw):
    listing = asm.parse_listing(ENCLAVE_HEADER + body)
    return Simulator(listing, **kw)


def test_plain_run_reaches_eexit():
    sim = make_sim(
        "0000000000001000 <enclave_entry>:\n"
        "1000: mov $0x4,%eax\n"
        "1005: enclu\n")
    sim.eenter()
    assert sim.run() == "eexit"
    kinds = [k for _, k, _, _ in sim.trace]
    assert kinds[0] == "EENTER" and kinds[-1] == "EEXIT"


def test_zero_displacement_call_skips_the_rsb():
    sim = make_sim(
        "0000000000001000 <enclave_entry>:\n"
        "1000: callq 1005\n"
        "1005: mov $0x4,%eax\n"
        "100a: enclu\n")
    sim.cpu.regs["rsp"] = 0x50000
    sim.eenter()
    assert sim.run() == "eexit"
    assert sim.rsb.occupancy == 0


def test_ordinary_call_pushes_the_rsb():
    sim = make_sim(
        "0000000000001000 <enclave_entry>:\n"
        "1000: callq 2000\n"
        "1005: nop\n"
        "0000000000002000 <fn>:\n"
        "2000: mov $0x4,%eax\n"
        "2005: enclu\n")
    sim.cpu.regs["rsp"] = 0x50000
    sim.eenter()
    assert sim.run() == "eexit"
    assert sim.rsb.occupancy == 1


def test_mispredicted_indirect_jump_executes_transiently_then_squashes():
    sim = make_sim(
        "0000000000001000 <enclave_entry>:\n"
        "1000: jmpq *0x0(%r12)\n"
        "0000000000002000 <dest>:\n"
        "2000: mov $0x4,%eax\n"
        "2005: enclu\n"
        "0000000000003000 <gadget>:\n"
        "3000: mov $0x99,%r9\n"
        "3007: mov (%r8),%r10\n"
        "300b: retq\n")
    sim.cpu.regs["r12"] = 0x11000
    sim.cpu.regs["r8"] = 0x61000
    sim.mem.write(0x11000, 0x2000, 8)     # true target, slow to load
    sim.btb.update(0x1000, 0x3000, mode="normal")
    sim.eenter()
    assert sim.run() == "eexit"
    lines = sim.trace_lines()
    assert any("PREDICT 0x1000 target=0x3000" in l and "wrong" in l
               for l in lines)
    assert any("SQUASH 0x1000" in l for l in lines)
    assert any("TLOAD 0x61000" in l for l in lines)
    # transient register writes never become architectural
    assert sim.cpu.regs["r9"] == 0
    assert sim.cpu.regs["r10"] == 0


def test_ibpb_at_eenter_clears_the_btb():
    sim = make_sim(
        "0000000000001000 <enclave_entry>:\n"
        "1000: mov $0x4,%eax\n"
        "1005: enclu\n",
        cm=CountermeasureConfig(ibpb_events=frozenset({"eenter"})))
    sim.btb.update(0x2000, 0x3000)
    sim.eenter()
    assert sim.btb.predict(0x2000) is None
    assert any(k == "IBPB" for _, k, _, _ in sim.trace)


def test_aex_spills_registers_to_ssa_and_eresume_restores():
    listing = asm.parse_listing(
        ENCLAVE_HEADER + ".ssa 0x17000\n"
        "0000000000001000 <enclave_entry>:\n"
        "1000: mov $0x1234,%rbx\n"
        "1007: jmp 1007\n")
    sim = Simulator(listing)
    sim.add_interrupt(addr=0x1007)
    sim.eenter()
    assert sim.run() == "aex"
    base = sim.enclave.gpr_base(0)
    assert sim.mem.read(base + 3 * 8, 8) == 0x1234          # rbx slot
    assert sim.mem.read(base + 136, 8) == 0x1007            # rip slot
    assert sim.cpu.regs["rbx"] == 0                         # synthetic state
    sim.eresume()
    assert sim.cpu.regs["rbx"] == 0x1234
    assert sim.cpu.rip == 0x1007


def test_reserved_page_faults_to_handler():
    listing = asm.parse_listing(
        ENCLAVE_HEADER + ".ssa 0x17000\n"
        "0000000000001000 <enclave_entry>:\n"
        "1000: mov 0x0(%r13),%rcx\n"
        "1005: mov $0x4,%eax\n"
        "100a: enclu\n")
    sim = Simulator(listing)
    sim.cpu.regs["r13"] = 0x15000
    sim.set_reserved_bit(0x15000, True)
    cleared = []
    def handler(s, fault):
        cleared.append(fault.addr)
        s.set_reserved_bit(0x15000, False)
    sim.on_fault(handler)
    sim.eenter()
    assert sim.run() == "eexit"
    assert cleared == [0x15000]
    assert any(k == "FAULT" for _, k, _, _ in sim.trace)
    assert any(k == "ERESUME" for _, k, _, _ in sim.trace)


# ---------------------------------------------------------------------------
# retpoline transform

def test_retpoline_replaces_indirect_branches():
    listing = asm.parse_listing(
        ENCLAVE_HEADER +
        "0000000000001000 <enclave_entry>:\n"
        "1000: mov $0x2000,%rax\n"
        "1007: jmpq *%rax\n"
        "0000000000002000 <dest>:\n"
        "2000: mov $0x4,%eax\n"
        "2005: enclu\n")
    transformed = apply_retpoline(listing)
    assert not any(i.klass in (asm.INDIRECT_JUMP, asm.INDIRECT_CALL)
                   for i in transformed.instructions
                   if i.address < 0x2006)
    sim = Simulator(transformed)
    sim.cpu.regs["rsp"] = 0x50000
    sim.eenter()
    assert sim.run() == "eexit"            # semantics preserved
    assert sim.cpu.regs["rax"] == 4


def test_retpoline_is_identity_without_indirect_sites():
    listing = asm.parse_listing(
        ENCLAVE_HEADER +
        "0000000000001000 <enclave_entry>:\n"
        "1000: retq\n")
    assert apply_retpoline(listing) is listing


# ---------------------------------------------------------------------------
# cpu presets

PLAIN_RET = (
    "0000000000001000 <enclave_entry>:\n"
    "1000: retq\n"
    "1001: mov $0x4,%eax\n"
    "1006: enclu\n")


def test_pre_skylake_ret_stalls_on_empty_rsb():
    sim = make_sim(PLAIN_RET,
                   cpu=CPUModel(name="pre-skylake",
                                rsb_fallback_to_btb=False))
    sim.cpu.regs["rsp"] = 0x50000
    sim.mem.write(0x50000, 0x1001, 8)
    sim.btb.update(0x1000, 0x3000, mode="normal")
    sim.eenter()
    assert sim.run() == "eexit"
    lines = sim.trace_lines()
    assert any("STALL 0x1000" in l for l in lines)
    assert not any("PREDICT 0x1000" in l for l in lines)


def test_skylake_ret_falls_back_to_the_btb():
    sim = make_sim(PLAIN_RET)
    sim.cpu.regs["rsp"] = 0x50000
    sim.mem.write(0x50000, 0x1001, 8)
    sim.btb.update(0x1000, 0x3000, mode="normal")
    sim.eenter()
    assert sim.run() == "eexit"
    assert any("PREDICT 0x1000 target=0x3000" in l
               for l in sim.trace_lines())
