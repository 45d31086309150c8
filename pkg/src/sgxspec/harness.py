"""End-to-end attack orchestration over the simulator.

Covers the full loop: poison the predictor, arm the fault-assisted eviction
handler, set registers, trigger the enclave, and decode the monitored array
with Flush-Reload. Also provides the sliding-window byte extraction, the
SSA register snapshot and stack key demos, and the countermeasure matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import asm
from .config import CountermeasureConfig, CPUModel, LatencyConfig, cpu_model
from .machine import MASK64
from .uarch import LINE, PAGE, Simulator

RETRY_BUDGET = 8
RUN_BUDGET = 200_000

# the bundled victim's leak gadget: a 4-byte load at 0x38(%rsi), then a
# compare whose address is rbx + 8 * loaded + 0x258
EXTRACT_LOAD_DISP = 0x38
EXTRACT_SECOND_DISP = 0x258
EXTRACT_SCALE = 8
EXTRACT_ARRAY_BASE = 0x40_0000_0000
EXTRACT_ARRAY_STRIDE = EXTRACT_SCALE << 24   # one entry per value of the top byte


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class MonitoredArray:
    base: int
    stride: int = LINE
    count: int = 256

    def __post_init__(self):
        if self.stride < LINE:
            raise ScenarioError("array stride below the cache-line size")

    def entry_addr(self, i):
        return self.base + i * self.stride

    def flush(self, sim):
        """Flush every entry; sweeping the array also warms its pages."""
        span = self.count * self.stride
        if span // LINE <= 65536:
            for addr in range(self.base, self.base + span, LINE):
                sim.cache.flush(addr)
                sim.trans.install(addr)
        else:
            for line in sim.cache.lines_in_range(self.base, self.base + span):
                sim.cache.flush(line)
            for i in range(self.count):
                sim.trans.install(self.entry_addr(i))

    def reload(self, sim):
        """Classify entries hit/miss by reload latency; returns entry set."""
        threshold = sim.lat.reload_threshold
        span = self.count * self.stride
        hits = set()
        if span // LINE <= 65536:
            for addr in range(self.base, self.base + span, LINE):
                if sim.cache.probe(addr) < threshold:
                    hits.add((addr - self.base) // self.stride)
                sim.cache.install(addr)
        else:
            for line in sim.cache.lines_in_range(self.base, self.base + span):
                if sim.cache.probe(line) < threshold:
                    hits.add((line - self.base) // self.stride)
        return hits


@dataclass
class AttackResult:
    recovered: list
    expected: list | None = None
    attempts: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    notes: str = ""

    @property
    def success_rate(self):
        if not self.expected:
            return 0.0
        ok = sum(1 for r, e in zip(self.recovered, self.expected) if r == e)
        return ok / len(self.expected)

    def recovered_bytes(self):
        return bytes(0 if b is None else b for b in self.recovered)


# ---------------------------------------------------------------------------
# scenario DSL

def parse_scenario(text):
    """Parse the line-oriented scenario DSL into directive tuples."""
    dirs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        op = parts[0]
        try:
            if op == "array":
                base = int(parts[1], 0)
                stride = int(parts[2], 0) if len(parts) > 2 else LINE
                count = int(parts[3], 0) if len(parts) > 3 else 256
                dirs.append(("array", MonitoredArray(base, stride, count)))
            elif op == "handler":
                hop = parts[1]
                if hop not in ("clear_reserved", "evict_set", "deplete_rsb"):
                    raise ScenarioError(f"unknown handler op {hop!r}")
                args = tuple(int(x, 0) for x in parts[2:])
                dirs.append(("handler", hop, args))
            elif op == "poison_btb":
                src, dst = int(parts[1], 0), int(parts[2], 0)
                reps = int(parts[3], 0) if len(parts) > 3 else 1
                mode = parts[4] if len(parts) > 4 else "cross-process"
                if mode not in ("same-process", "cross-process"):
                    raise ScenarioError(f"unknown poison mode {mode!r}")
                core = int(parts[5], 0) if len(parts) > 5 else 0
                dirs.append(("poison_btb", src, dst, reps, mode, core))
            elif op == "deplete_rsb":
                dirs.append(("deplete_rsb", parts[1] if len(parts) > 1 else "ret-loop"))
            elif op == "set_reg":
                dirs.append(("set_reg", parts[1], int(parts[2], 0)))
            elif op == "set_reserved":
                dirs.append(("set_reserved", int(parts[1], 0),
                             parts[2].lower() in ("on", "1", "true")))
            elif op == "interrupt":
                if parts[1] == "addr":
                    dirs.append(("interrupt", "addr", int(parts[2], 0)))
                else:
                    dirs.append(("interrupt", "cycle", int(parts[2], 0)))
            elif op == "flush":
                dirs.append(("flush",))
            elif op == "eenter":
                dirs.append(("eenter",))
            elif op == "reload":
                dirs.append(("reload",))
            elif op == "expect":
                if parts[1] == "unknown":
                    dirs.append(("expect", None))
                else:
                    dirs.append(("expect", bytes.fromhex(parts[1])))
            else:
                raise ScenarioError(f"unknown directive {op!r}")
        except (IndexError, ValueError) as exc:
            if isinstance(exc, ScenarioError):
                raise
            raise ScenarioError(f"scenario line {lineno}: {exc}")
    return dirs


def load_scenario(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_scenario(fh.read())


def _shadow_source(src, mode):
    """Same-process poisoning uses a shadow branch at an aliased address;
    cross-process poisoning replicates the exact victim address."""
    if mode == "cross-process":
        return src
    return src | (1 << 46)


def _make_handler(ops):
    def handler(sim, fault):
        for hop, args in ops:
            if hop == "clear_reserved":
                sim.trans.set_reserved(args[0], False)
            elif hop == "evict_set":
                sim.cache.evict_set(args[0])
                sim.trans.drop_page(args[0])
            elif hop == "deplete_rsb":
                sim.rsb.clear()
    return handler


def run_scenario(listing, scenario, cpu=CPUModel(), lat=LatencyConfig(),
                 cm=CountermeasureConfig(), secret_overrides=(),
                 retry_budget=RETRY_BUDGET):
    """Execute a scenario; each flush..reload block recovers one byte."""
    if isinstance(scenario, str):
        scenario = parse_scenario(scenario)
    sim = Simulator(listing, cpu=cpu, lat=lat, cm=cm)
    for addr, data in secret_overrides:
        for i, b in enumerate(data):
            sim.mem.write_byte(addr + i, b)

    array = None
    handler_ops = []
    expected = None
    recovered, attempts = [], []

    # split into a prelude and flush..reload blocks
    blocks, prelude, cur = [], [], None
    for d in scenario:
        if d[0] == "flush":
            if cur is not None:
                blocks.append(cur)
            cur = [d]
        elif cur is not None:
            cur.append(d)
            if d[0] == "reload":
                blocks.append(cur)
                cur = None
        else:
            prelude.append(d)
    if cur is not None:
        blocks.append(cur)

    def apply(d):
        nonlocal array, expected
        op = d[0]
        if op == "array":
            array = d[1]
        elif op == "handler":
            handler_ops.append((d[1], d[2]))
            sim.on_fault(_make_handler(handler_ops))
        elif op == "poison_btb":
            _, src, dst, reps, mode, core = d
            shadow = _shadow_source(src, mode)
            for _ in range(reps):
                sim.btb.update(shadow, dst, context=core, mode="normal")
        elif op == "deplete_rsb":
            sim.rsb.clear()
        elif op == "set_reg":
            reg = asm.registers.lookup(d[1])
            if reg is None:
                raise ScenarioError(f"unknown register {d[1]!r}")
            sim.cpu.write(reg, d[2])
        elif op == "set_reserved":
            sim.set_reserved_bit(d[1], d[2])
        elif op == "interrupt":
            if d[1] == "addr":
                sim.add_interrupt(addr=d[2])
            else:
                sim.add_interrupt(cycle=d[2])
        elif op == "eenter":
            sim.eenter()
            sim.run(RUN_BUDGET)
        elif op == "expect":
            expected = d[1]
        elif op == "flush":
            if array is None:
                raise ScenarioError("flush before any array directive")
            array.flush(sim)
        elif op == "reload":
            raise AssertionError("reload handled by block runner")

    for d in prelude:
        apply(d)
    for block in blocks:
        byte, tries = _run_block(sim, block, apply, lambda: array,
                                 retry_budget)
        recovered.append(byte)
        attempts.append(tries)

    exp_list = list(expected) if expected is not None else None
    return AttackResult(recovered=recovered, expected=exp_list,
                        attempts=attempts, trace=sim.trace_lines())


def _run_block(sim, block, apply, get_array, retry_budget):
    for attempt in range(1, retry_budget + 1):
        for d in block:
            if d[0] == "reload":
                hits = get_array().reload(sim)
                if len(hits) == 1:
                    return hits.pop(), attempt
            else:
                apply(d)
    return None, retry_budget


# ---------------------------------------------------------------------------
# programmatic attacks against the bundled victim

@dataclass(frozen=True)
class AttackPlan:
    """Addresses wiring an extraction attack to a victim program."""
    poison_src: int          # victim return instruction
    poison_dst: int          # leak gadget entry
    fault_addr: int          # data page armed with the reserved bit
    evict_addr: int          # victim stack slot holding the return address
    selector: int = 0        # edi value selecting the victim's attack path

    @classmethod
    def for_program(cls, listing):
        return cls(
            poison_src=asm.resolve_symbol(listing, "check_state+0x9"),
            poison_dst=asm.resolve_symbol(listing, "leak_gadget"),
            fault_addr=0x150000,
            evict_addr=0x15FFF8)


def _extract_one_byte(sim, plan, array, rsi, rbx, retry_budget):
    for attempt in range(1, retry_budget + 1):
        array.flush(sim)
        sim.btb.update(plan.poison_src, plan.poison_dst,
                       context=sim.core_id, mode="normal")
        sim.set_reserved_bit(plan.fault_addr, True)
        sim.cpu.regs["rdi"] = plan.selector
        sim.cpu.regs["rsi"] = rsi & MASK64
        sim.cpu.regs["rbx"] = rbx & MASK64
        sim.eenter()
        status = sim.run(RUN_BUDGET)
        if status != "eexit":
            sim.set_reserved_bit(plan.fault_addr, False)
            return None, attempt
        hits = array.reload(sim)
        if len(hits) == 1:
            return hits.pop(), attempt
    return None, retry_budget


def extract_region(sim, lo, hi, known, plan=None, retry_budget=RETRY_BUDGET):
    """Recover [lo, hi) one byte at a time with the sliding 4-byte window.

    `known` must give the 3 bytes at lo-3..lo-1. Each step loads 3 known
    plus 1 unknown byte; rbx positions the monitored array so the unknown
    top byte selects the entry. An inconclusive byte stops the slide.
    """
    if len(known) < 3:
        raise ScenarioError("need 3 known bytes preceding the target range")
    if plan is None:
        plan = AttackPlan.for_program(sim.listing)
    array = MonitoredArray(EXTRACT_ARRAY_BASE, EXTRACT_ARRAY_STRIDE, 256)
    handler_ops = [("clear_reserved", (plan.fault_addr,)),
                   ("evict_set", (plan.evict_addr,)),
                   ("deplete_rsb", ())]
    sim.on_fault(_make_handler(handler_ops))

    window = list(known[-3:])
    recovered, attempts = [], []
    halted = False
    for addr in range(lo, hi):
        if halted:
            recovered.append(None)
            attempts.append(0)
            continue
        k = window[-3] | (window[-2] << 8) | (window[-1] << 16)
        rsi = addr - 3 - EXTRACT_LOAD_DISP
        rbx = (array.base - EXTRACT_SCALE * k - EXTRACT_SECOND_DISP) & MASK64
        byte, tries = _extract_one_byte(sim, plan, array, rsi, rbx,
                                        retry_budget)
        recovered.append(byte)
        attempts.append(tries)
        if byte is None:
            halted = True
        else:
            window.append(byte)
    expected = [sim.mem.read_byte(a) for a in range(lo, hi)]
    return AttackResult(recovered=recovered, expected=expected,
                        attempts=attempts, trace=sim.trace_lines(),
                        notes="halted" if halted else "")


def make_simulator(listing, cpu=CPUModel(), lat=LatencyConfig(),
                   cm=CountermeasureConfig()):
    return Simulator(listing, cpu=cpu, lat=lat, cm=cm)


def read_ssa_registers(listing, cpu=CPUModel(), lat=LatencyConfig(),
                       cm=CountermeasureConfig(), victim_regs=None):
    """Interrupt the looping victim, then extract its SSA register file.

    Returns (snapshot dict, AttackResult over the 184 GPRSGX bytes).
    """
    from .uarch import EXINFO_SIZE, GPRSGX_OFFSETS, GPRSGX_SIZE, GPR_ORDER

    sim = make_simulator(listing, cpu, lat, cm)
    loop = asm.resolve_symbol(listing, "victim_main+0x17")
    sim.add_interrupt(addr=loop)
    if victim_regs:
        for r, v in victim_regs.items():
            sim.cpu.regs[r] = v & MASK64
    sim.cpu.regs["rdi"] = 1
    sim.eenter()
    status = sim.run(RUN_BUDGET)
    if status != "aex":
        raise ScenarioError(f"victim did not reach the interrupt ({status})")

    base = sim.enclave.gpr_base(0)
    result = extract_region(sim, base, base + GPRSGX_SIZE,
                            known=[0] * EXINFO_SIZE)
    data = result.recovered_bytes()
    snapshot = {}
    if all(b is not None for b in result.recovered):
        for reg in GPR_ORDER:
            off = GPRSGX_OFFSETS[reg]
            snapshot[reg] = int.from_bytes(data[off:off + 8], "little")
        snapshot["rip"] = int.from_bytes(
            data[GPRSGX_OFFSETS["rip"]:GPRSGX_OFFSETS["rip"] + 8], "little")
    return snapshot, result


SEALED_BLOB_ADDR = 0x108000
KEY_STACK_LO = 0x16FFD0
KEY_STACK_HI = 0x16FFE8
STACK_FILL = 0xCC


def seeded_bytes(seed, n):
    """Deterministic demo secret bytes from an explicit seed."""
    import random

    rng = random.Random(seed)
    return bytes(rng.randrange(256) for _ in range(n))


def steal_key_demo(listing, seed=0, cpu=CPUModel(), lat=LatencyConfig(),
                   cm=CountermeasureConfig()):
    """Suspend the victim at its decrypt call, then extract the stack region
    holding the just-unsealed key, bootstrapped from the 0xcc stack fill."""
    sim = make_simulator(listing, cpu, lat, cm)
    key = seeded_bytes(seed, 16)
    for i, b in enumerate(key):
        sim.mem.write_byte(SEALED_BLOB_ADDR + i, b)
    marked = asm.resolve_symbol(listing, "decrypt_block")
    sim.set_reserved_bit(marked, True)
    sim.on_fault(lambda s, f: "suspend")
    sim.cpu.regs["rdi"] = 2
    sim.eenter()
    status = sim.run(RUN_BUDGET)
    if status != "aex":
        raise ScenarioError(f"victim was not suspended at the marked call "
                            f"({status})")
    sim.set_reserved_bit(marked, False)
    result = extract_region(sim, KEY_STACK_LO, KEY_STACK_HI,
                            known=[STACK_FILL] * 3)
    recovered_key = result.recovered[8:24]
    ok = all(b is not None for b in recovered_key) and \
        bytes(recovered_key) == key
    result.notes = f"key={'recovered' if ok else 'unknown'}"
    return key, recovered_key, result


# ---------------------------------------------------------------------------
# countermeasure matrix

def default_matrix():
    return [
        ("baseline", "skylake", CountermeasureConfig(), 0),
        ("ibrs", "skylake", CountermeasureConfig(ibrs=True), 0),
        ("ibpb-at-eenter", "skylake",
         CountermeasureConfig(ibpb_events=frozenset({"eenter"})), 0),
        ("retpoline+skylake", "skylake",
         CountermeasureConfig(retpoline=True), 0),
        ("retpoline+pre-skylake", "pre-skylake",
         CountermeasureConfig(retpoline=True), 0),
        ("cross-core", "skylake", CountermeasureConfig(), 1),
        ("cross-core+stibp", "skylake", CountermeasureConfig(stibp=True), 1),
    ]


def _with_poison_core(scenario, core):
    out = []
    for d in scenario:
        if d[0] == "poison_btb":
            out.append(d[:5] + (core,))
        else:
            out.append(d)
    return out


def countermeasure_matrix(listing, scenario, cells=None, lat=LatencyConfig(),
                          secret_overrides=()):
    """One deterministic scenario run per cell; returns
    [(label, success rate)]."""
    if isinstance(scenario, str):
        scenario = parse_scenario(scenario)
    if cells is None:
        cells = default_matrix()
    rows = []
    for label, cpu_name, cm, poison_core in cells:
        dirs = _with_poison_core(scenario, poison_core)
        result = run_scenario(listing, dirs, cpu=cpu_model(cpu_name),
                              lat=lat, cm=cm,
                              secret_overrides=secret_overrides)
        rows.append((label, result.success_rate))
    return rows
