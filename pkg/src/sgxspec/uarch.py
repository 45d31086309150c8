"""Deterministic model of a speculating core.

Direct-mapped BTB indexed and tagged by the low 32 source-address bits, a
16-entry RSB with an optional fallback-to-BTB underflow mode, an inclusive
three-level cache with LRU sets, a TLB/cached-PTE translation model, SGX
mode transitions with SSA spills, and transient execution with squash.

Timing is event-granular: one instruction dispatches per cycle, memory
events complete at dispatch plus latency, and an indirect branch resolves
when the load producing its target completes. Transient loads additionally
wait for the registers forming their address, so dependent gadget loads
chain realistically.

Cache-line installs during transient execution are asymmetric: accesses to
enclave pages install when issued (an in-flight fill is not cancelled by the
squash, which is what lets repeated attempts warm the victim's data), while
accesses outside the enclave install only if they complete before the branch
resolves. That makes the observable leak follow the race between the branch
target load and the transient out-of-enclave access exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import asm
from .config import CountermeasureConfig, CPUModel, LatencyConfig
from .machine import MASK64, CPUState, Fault, Machine, Memory

PAGE = 4096
LINE = 64
LOW32 = 0xFFFF_FFFF

NORMAL = "normal"
ENCLAVE = "enclave"


# ---------------------------------------------------------------------------
# predictors

@dataclass
class BTBEntry:
    tag: int
    target_low32: int
    src_full: int
    context: int
    inserted_mode: str


class BTB:
    """Direct-mapped branch target buffer keyed by the low 32 source bits."""

    def __init__(self, index_bits=12):
        self.index_bits = index_bits
        self.table = {}

    def _slot(self, src):
        low = src & LOW32
        index = low & ((1 << self.index_bits) - 1)
        tag = low >> self.index_bits
        return index, tag

    def update(self, src, dst, context=0, mode=NORMAL):
        index, tag = self._slot(src)
        self.table[index] = BTBEntry(tag=tag, target_low32=dst & LOW32,
                                     src_full=src & MASK64, context=context,
                                     inserted_mode=mode)

    def predict(self, src, context=0, in_enclave=False,
                cm=CountermeasureConfig(), exact_source=False):
        index, tag = self._slot(src)
        e = self.table.get(index)
        if e is None or e.tag != tag:
            return None
        if cm.stibp and e.context != context:
            return None
        if cm.ibrs and in_enclave and e.inserted_mode == NORMAL:
            return None
        if exact_source and e.src_full != (src & MASK64):
            return None
        # the predicted target lands in the fetching code's own 4 GiB region
        region = src & ~LOW32 & MASK64
        return region | e.target_low32

    def clear(self):
        self.table.clear()


class RSB:
    def __init__(self, entries=16, fallback_to_btb=True):
        self.capacity = entries
        self.fallback_to_btb = fallback_to_btb
        self.stack = []

    def push(self, ret_addr):
        if len(self.stack) >= self.capacity:
            self.stack.pop(0)          # wrap: oldest entry overwritten
        self.stack.append(ret_addr & MASK64)

    def pop(self):
        if self.stack:
            return self.stack.pop()
        return None

    @property
    def occupancy(self):
        return len(self.stack)

    def clear(self):
        self.stack.clear()

    def refill(self, addr):
        self.stack = [addr & MASK64] * self.capacity


# ---------------------------------------------------------------------------
# memory hierarchy

class CacheModel:
    """Inclusive L1/L2/LLC with LRU sets; content tracked as tag presence."""

    LEVELS = (("l1", 64, 8), ("l2", 1024, 8), ("llc", 8192, 16))

    def __init__(self, lat: LatencyConfig):
        self.lat = lat
        self.sets = {name: {} for name, _, _ in self.LEVELS}

    def _place(self, name, nsets, ways, addr):
        line = addr // LINE
        idx = line % nsets
        s = self.sets[name].setdefault(idx, [])
        if line in s:
            s.remove(line)
        s.append(line)
        if len(s) > ways:
            s.pop(0)

    def _holds(self, name, nsets, addr):
        line = addr // LINE
        return line in self.sets[name].get(line % nsets, ())

    def probe(self, addr):
        """Data latency without installing."""
        for name, nsets, _ in self.LEVELS:
            if self._holds(name, nsets, addr):
                return getattr(self.lat, name)
        return self.lat.memory

    def level_of(self, addr):
        for name, nsets, _ in self.LEVELS:
            if self._holds(name, nsets, addr):
                return name
        return "memory"

    def install(self, addr):
        for name, nsets, ways in self.LEVELS:
            self._place(name, nsets, ways, addr)

    def access(self, addr):
        lat = self.probe(addr)
        self.install(addr)
        return lat

    def flush(self, addr):
        """clflush: remove the line from the entire hierarchy."""
        line = addr // LINE
        for name, nsets, _ in self.LEVELS:
            s = self.sets[name].get(line % nsets)
            if s and line in s:
                s.remove(line)

    def lines_in_range(self, lo, hi):
        """Addresses of cached lines inside [lo, hi), any level."""
        out = set()
        for name, _, _ in self.LEVELS:
            for s in self.sets[name].values():
                for line in s:
                    addr = line * LINE
                    if lo <= addr < hi:
                        out.add(addr)
        return out

    def evict_set(self, addr):
        """Model of eviction-by-congruent-accesses: every line in the sets
        congruent to addr is removed at every level."""
        line = addr // LINE
        for name, nsets, _ in self.LEVELS:
            self.sets[name].pop(line % nsets, None)


class TranslationModel:
    def __init__(self, lat: LatencyConfig):
        self.lat = lat
        self.tlb = set()
        self.cached_pte = set()
        self.reserved = set()

    def probe(self, addr):
        """(latency, fault) without state change."""
        page = addr // PAGE
        if page in self.reserved:
            return 0, True
        if page in self.tlb:
            return 0, False
        if page in self.cached_pte:
            return self.lat.cached_walk, False
        return self.lat.memory_walk, False

    def install(self, addr):
        page = addr // PAGE
        self.tlb.add(page)
        self.cached_pte.add(page)

    def cache_pte(self, addr):
        self.cached_pte.add(addr // PAGE)

    def translate(self, addr):
        lat, fault = self.probe(addr)
        if fault:
            raise Fault(addr, "page")
        self.install(addr)
        return lat

    def flush_tlb_range(self, lo, hi):
        for page in range(lo // PAGE, (hi + PAGE - 1) // PAGE):
            self.tlb.discard(page)

    def drop_page(self, addr):
        page = addr // PAGE
        self.tlb.discard(page)
        self.cached_pte.discard(page)

    def set_reserved(self, addr, on):
        page = addr // PAGE
        if on:
            self.reserved.add(page)
        else:
            self.reserved.discard(page)


# ---------------------------------------------------------------------------
# enclave model

GPRSGX_SIZE = 184
EXINFO_SIZE = 4
GPR_ORDER = ("rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi",
             "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15")
GPRSGX_OFFSETS = {r: i * 8 for i, r in enumerate(GPR_ORDER)}
GPRSGX_OFFSETS["rflags"] = 128
GPRSGX_OFFSETS["rip"] = 136
GPRSGX_OFFSETS["ursp"] = 144
GPRSGX_OFFSETS["urbp"] = 152
GPRSGX_OFFSETS["exitinfo"] = 160
GPRSGX_OFFSETS["fsbase"] = 168
GPRSGX_OFFSETS["gsbase"] = 176
SSA_FRAME = PAGE


@dataclass
class EnclaveImage:
    lo: int
    hi: int
    entry: int
    tcs: int | None = None
    ssa_base: int | None = None
    ssa_count: int = 2
    secrets: list = field(default_factory=list)

    @classmethod
    def from_listing(cls, listing):
        if listing.enclave_range is None:
            raise ValueError("program has no .enclave range")
        if listing.entry_symbol is None:
            raise ValueError("program has no .entry symbol")
        entry = listing.symbols[listing.entry_symbol]
        return cls(lo=listing.enclave_range[0], hi=listing.enclave_range[1],
                   entry=entry, tcs=listing.tcs, ssa_base=listing.ssa_base,
                   secrets=list(listing.secrets))

    def contains(self, addr):
        return self.lo <= addr < self.hi

    def gpr_base(self, cssa):
        if self.ssa_base is None:
            raise ValueError("program has no .ssa base")
        return self.ssa_base + SSA_FRAME * (cssa + 1) - GPRSGX_SIZE


class SimError(RuntimeError):
    pass


class BudgetExceeded(SimError):
    pass


# ---------------------------------------------------------------------------
# simulator

class Simulator:
    def __init__(self, listing, cpu: CPUModel = CPUModel(),
                 lat: LatencyConfig = LatencyConfig(),
                 cm: CountermeasureConfig = CountermeasureConfig(),
                 core_id=0, enclave=None, btb=None):
        if cm.retpoline:
            listing = apply_retpoline(listing)
        self.listing = listing
        self.machine = Machine(listing)
        self.mem = Memory(background=self._background)
        self.cpu = CPUState()
        self.cpu_model = cpu
        self.lat = lat
        self.cm = cm
        self.core_id = core_id
        self.btb = btb if btb is not None else BTB(cpu.btb_index_bits)
        self.rsb = RSB(cpu.rsb_entries, cpu.rsb_fallback_to_btb)
        self.cache = CacheModel(lat)
        self.trans = TranslationModel(lat)
        self.mode = NORMAL
        self.cycle = 0
        self.trace = []
        self.fault_handler = None
        self.interrupt_addrs = set()
        self.interrupt_cycles = set()
        self.cssa = 0
        self.truncated = False
        self.enclave = enclave
        if enclave is None and listing.enclave_range is not None:
            self.enclave = EnclaveImage.from_listing(listing)

    # -- plumbing ---------------------------------------------------------------

    def _background(self, addr):
        for lo, hi, byte in self.listing.fills:
            if lo <= addr < hi:
                return byte
        for base, data in self.listing.secrets:
            if base <= addr < base + len(data):
                return data[addr - base]
        return 0

    def emit(self, cycle, kind, addr, detail=""):
        self.trace.append((cycle, kind, addr, detail))

    def trace_lines(self):
        return [f"{c} {k} 0x{a:x} {d}".rstrip() for c, k, a, d in self.trace]

    def in_enclave_addr(self, addr):
        return self.enclave is not None and self.enclave.contains(addr)

    # -- architectural memory timing ---------------------------------------------

    def mem_access(self, addr, kind="load"):
        """Latency of an architectural access; installs TLB/PTE and line."""
        tlat = self.trans.translate(addr)
        dlat = self.cache.access(addr)
        return tlat + dlat

    def _check_access(self, addr, width, kind):
        page = addr // PAGE
        if page in self.trans.reserved:
            raise Fault(addr, kind)

    # -- countermeasure hooks ---------------------------------------------------

    def ibpb(self, event):
        self.btb.clear()
        self.emit(self.cycle, "IBPB", 0, event)

    # -- SGX transitions ---------------------------------------------------------

    def eenter(self, tcs=None):
        if self.mode != NORMAL:
            raise SimError("eenter while already in enclave mode")
        if self.enclave is None:
            raise SimError("no enclave image loaded")
        if self.cssa >= self.enclave.ssa_count:
            raise SimError("SSA slots exhausted")
        if "eenter" in self.cm.ibpb_events:
            self.ibpb("eenter")
        if self.cm.rsb_refill_on_enclave_entry:
            self.rsb.refill(self.enclave.entry)
        self.mode = ENCLAVE
        self.cpu.rip = self.enclave.entry
        self.emit(self.cycle, "EENTER", self.enclave.entry)

    def eexit(self):
        if self.mode != ENCLAVE:
            raise SimError("eexit outside enclave mode")
        self.mode = NORMAL
        self.trans.flush_tlb_range(self.enclave.lo, self.enclave.hi)
        self.emit(self.cycle, "EEXIT", self.cpu.rip)

    def aex(self, reason="interrupt"):
        if self.mode != ENCLAVE:
            raise SimError("aex outside enclave mode")
        if self.cssa >= self.enclave.ssa_count:
            raise SimError("SSA slots exhausted at aex")
        base = self.enclave.gpr_base(self.cssa)
        for i in range(EXINFO_SIZE):
            self.mem.write_byte(base - EXINFO_SIZE + i, 0)
        for reg, off in GPRSGX_OFFSETS.items():
            if reg in ("exitinfo",):
                self.mem.write(base + off, 0, 4)
                self.mem.write(base + off + 4, 0, 4)
            elif reg in ("rflags", "fsbase", "gsbase"):
                self.mem.write(base + off, 0, 8)
            elif reg == "rip":
                self.mem.write(base + off, self.cpu.rip, 8)
            elif reg == "ursp":
                self.mem.write(base + off, self.cpu.regs["rsp"], 8)
            elif reg == "urbp":
                self.mem.write(base + off, self.cpu.regs["rbp"], 8)
            else:
                self.mem.write(base + off, self.cpu.regs[reg], 8)
        self.cssa += 1
        saved_rip = self.cpu.rip
        for r in self.cpu.regs:
            self.cpu.regs[r] = 0     # synthetic state loaded at AEX
        self.mode = NORMAL
        self.trans.flush_tlb_range(self.enclave.lo, self.enclave.hi)
        self.emit(self.cycle, "AEX", saved_rip, reason)

    def eresume(self):
        if self.mode != NORMAL:
            raise SimError("eresume while in enclave mode")
        if self.cssa == 0:
            raise SimError("eresume with no saved SSA frame")
        self.cssa -= 1
        base = self.enclave.gpr_base(self.cssa)
        for reg in GPR_ORDER:
            self.cpu.regs[reg] = self.mem.read(base + GPRSGX_OFFSETS[reg], 8)
        self.cpu.rip = self.mem.read(base + GPRSGX_OFFSETS["rip"], 8)
        self.mode = ENCLAVE
        self.emit(self.cycle, "ERESUME", self.cpu.rip)

    def set_reserved_bit(self, addr, on):
        self.trans.set_reserved(addr, on)

    def on_fault(self, handler):
        self.fault_handler = handler

    def add_interrupt(self, addr=None, cycle=None):
        if addr is not None:
            self.interrupt_addrs.add(addr)
        if cycle is not None:
            self.interrupt_cycles.add(cycle)

    # -- main loop ----------------------------------------------------------------

    def run(self, budget=200_000):
        """Execute until EEXIT, AEX-to-caller, halt, or budget exhaustion.

        Returns one of "eexit", "aex", "halt", "budget".
        """
        limit = self.cycle + budget
        while True:
            if self.cycle >= limit:
                self.truncated = True
                self.emit(self.cycle, "HALT", self.cpu.rip, "budget")
                return "budget"

            rip = self.cpu.rip
            ins = self.listing.at(rip)
            if ins is None:
                self.emit(self.cycle, "HALT", rip, "no instruction")
                return "halt"
            if self.mode == ENCLAVE:
                due = {c for c in self.interrupt_cycles if c <= self.cycle}
                if rip in self.interrupt_addrs or due:
                    self.interrupt_addrs.discard(rip)
                    self.interrupt_cycles -= due
                    self.aex("interrupt")
                    return "aex"

            t = self.cycle
            try:
                if (rip // PAGE) in self.trans.reserved:
                    raise Fault(rip, "exec")
                out = self.machine.execute(self.cpu, self.mem,
                                           check=self._check_access)
            except Fault as f:
                self.emit(t, "FAULT", f.addr, f.kind)
                if self.fault_handler is None:
                    raise SimError(f"unhandled fault at 0x{f.addr:x} "
                                   f"(rip 0x{rip:x})")
                if self.mode == ENCLAVE:
                    self.aex("fault")
                    self.cycle += 1
                    action = self.fault_handler(self, f)
                    if action == "suspend":
                        return "aex"
                    self.eresume()
                else:
                    self.fault_handler(self, f)
                self.cycle += 1
                continue

            d1_latency = None
            for kind, addr, width in out.accesses:
                lat = self.mem_access(addr, kind)
                self.emit(t, kind.upper(), addr, f"lat={lat}")
                d1_latency = lat
            if out.flushed is not None:
                self.cache.flush(out.flushed)
                self.emit(t, "CLFLUSH", out.flushed)

            if out.control == "enclu":
                leaf = out.target & MASK64
                if leaf == 4 and self.mode == ENCLAVE:
                    self.eexit()
                    self.cycle = t + 1
                    return "eexit"
                self.emit(t, "ENCLU", rip, f"leaf={leaf}")
                self.cycle = t + 1
                continue
            if out.control == "halt":
                self.emit(t, "HALT", rip)
                return "halt"

            if out.control == "call":
                if not out.zero_displacement_call:
                    ret_site = self.machine.next_addr(rip)
                    if ret_site is not None:
                        self.rsb.push(ret_site)
            if out.control in ("call", "jump", "ret") and out.indirect:
                self._resolve_indirect(ins, out, t, d1_latency)
                continue

            self.emit(t, "RETIRE", rip)
            self.cycle = t + 1

    # -- speculation -------------------------------------------------------------

    def _predict(self, ins, out):
        src = ins.address
        if out.control == "ret":
            predicted = self.rsb.pop()
            if predicted is not None:
                return predicted, "rsb"
            if not self.rsb.fallback_to_btb:
                return None, "stall"
            p = self.btb.predict(
                src, context=self.core_id, in_enclave=self.mode == ENCLAVE,
                cm=self.cm,
                exact_source=self.cpu_model.ret_poison_requires_exact_match)
            return p, "btb"
        p = self.btb.predict(src, context=self.core_id,
                             in_enclave=self.mode == ENCLAVE, cm=self.cm)
        return p, "btb"

    def _resolve_indirect(self, ins, out, t, d1_latency):
        src = ins.address
        true_target = out.target & MASK64
        if d1_latency is None:
            d1_latency = 1           # register-sourced target
        resolve_time = t + d1_latency
        predicted, source = self._predict(ins, out)

        if predicted is None:
            self.emit(t, "STALL", src, "no prediction")
        elif predicted == true_target:
            self.emit(t, "PREDICT", src, f"target=0x{predicted:x} src={source} correct")
        else:
            self.emit(t, "PREDICT", src, f"target=0x{predicted:x} src={source} wrong")
            self._transient(predicted, t + 1, resolve_time)
            self.emit(resolve_time, "SQUASH", src, f"true=0x{true_target:x}")

        self.emit(resolve_time, "RESOLVE", src, f"target=0x{true_target:x}")
        # resolution trains the predictor with the true target
        self.btb.update(src, true_target, context=self.core_id,
                        mode=self.mode)
        self.emit(resolve_time, "RETIRE", src)
        self.cycle = resolve_time + 1

    def _transient_access(self, kind, addr, dispatch, resolve_time):
        """Returns (completion, filled)."""
        tlat, fault = self.trans.probe(addr)
        if fault:
            return None, False
        dlat = self.cache.probe(addr)
        completion = dispatch + tlat + dlat
        inside = self.in_enclave_addr(addr)
        filled = False
        if inside:
            # issued fills on enclave lines complete despite the squash
            self.cache.install(addr)
            self.trans.cache_pte(addr)
            filled = True
        elif completion < resolve_time:
            self.cache.install(addr)
            self.trans.install(addr)
            filled = True
        self.emit(dispatch, "TLOAD" if kind != "store" else "TSTORE", addr,
                  f"complete={completion} fill={int(filled)} "
                  f"enclave={int(inside)}")
        return completion, filled

    def _transient(self, start_rip, t_start, resolve_time):
        tcpu = self.cpu.copy()
        tcpu.rip = start_rip
        tmem = self.mem.overlay()
        reg_ready = {}
        fetched = set()
        n = 0
        while n < self.cpu_model.transient_depth:
            rip = tcpu.rip
            ins = self.listing.at(rip)
            if ins is None:
                break
            dispatch = t_start + n
            # the address registers of any memory operand gate issue
            for op in ins.operands:
                if op.kind == "mem":
                    for r in (op.base, op.index):
                        if r is not None and r.name != "rip":
                            parent = asm.registers.normalize_register(r)[0]
                            dispatch = max(dispatch, reg_ready.get(parent, t_start))
            if dispatch >= resolve_time:
                break
            line = rip // LINE
            if line not in fetched:
                fetched.add(line)
                comp, _ = self._transient_access("fetch", rip, dispatch,
                                                 resolve_time)
                self.emit(dispatch, "TFETCH", rip,
                          f"complete={comp if comp is not None else '-'}")
                if comp is None:
                    break
            try:
                out = self.machine.execute(tcpu, tmem)
            except Fault:
                break
            completion = dispatch + 1
            aborted = False
            for kind, addr, width in out.accesses:
                comp, _ = self._transient_access(kind, addr, dispatch,
                                                 resolve_time)
                if comp is None:
                    aborted = True
                    break
                completion = max(completion, comp)
            if aborted:
                break
            dest = self._written_register(ins)
            if dest is not None:
                reg_ready[dest] = completion
            if out.control in ("serialize", "enclu", "halt"):
                break
            n += 1

    @staticmethod
    def _written_register(ins):
        if ins.klass in (asm.LOAD, asm.LEA, asm.REG_ARITH, asm.POP):
            ops = ins.operands
            if ops and ops[-1].kind == "reg":
                return asm.registers.normalize_register(ops[-1].reg)[0]
        return None


# ---------------------------------------------------------------------------
# retpoline transform

def apply_retpoline(listing):
    """Rewrite every register-indirect jump/call into a return trampoline.

    The original instruction becomes a direct jump (or call) to an appended
    thunk: call a setup block that overwrites the pushed return address with
    the intended target, then return through it. Non-speculative semantics
    are preserved; speculatively the trampoline's return is captured by an
    lfence loop.
    """
    sites = [ins for ins in listing.instructions
             if ins.klass in (asm.INDIRECT_JUMP, asm.INDIRECT_CALL)]
    if not sites:
        return listing
    for ins in sites:
        if ins.operands[0].kind != "reg":
            raise ValueError(
                f"retpoline transform supports register operands only "
                f"(0x{ins.address:x})")
    base = (listing.instructions[-1].address + 0x40) & ~0xF
    lines = []
    thunks = {}
    for i, ins in enumerate(sites):
        taddr = base + i * 0x40
        thunks[ins.address] = taddr
        reg = ins.operands[0].reg
        lines.append(f"{taddr:016x} <retpoline_thunk_{i}>:")
        lines.append(f"{taddr:x}: callq {taddr + 0x10:x}")
        lines.append(f"{taddr + 0x4:x}: lfence")
        lines.append(f"{taddr + 0x8:x}: jmp {taddr + 0x4:x}")
        lines.append(f"{taddr + 0x10:x}: mov %{reg}, (%rsp)")
        lines.append(f"{taddr + 0x18:x}: retq")
    out = []
    starts = {addr: name for name, addr in listing.symbols.items()}
    if listing.enclave_range:
        lo, hi = listing.enclave_range
        hi = max(hi, base + len(sites) * 0x40)
        out.append(f".enclave 0x{lo:x} 0x{hi:x}")
    if listing.entry_symbol:
        out.append(f".entry {listing.entry_symbol}")
    if listing.tcs is not None:
        out.append(f".tcs 0x{listing.tcs:x}")
    if listing.ssa_base is not None:
        out.append(f".ssa 0x{listing.ssa_base:x}")
    for addr, data in listing.secrets:
        out.append(f'.secret 0x{addr:x} "{data.hex()}"')
    for lo, hi, byte in listing.fills:
        out.append(f".fill 0x{lo:x} 0x{hi:x} 0x{byte:x}")
    for ins in listing.instructions:
        if ins.address in starts:
            out.append(f"{ins.address:016x} <{starts[ins.address]}>:")
        if ins.address in thunks:
            mnem = "callq" if ins.klass == asm.INDIRECT_CALL else "jmp"
            out.append(f"{ins.address:x}: {mnem} {thunks[ins.address]:x}")
        else:
            out.append(ins.emit())
    out.extend(lines)
    return asm.parse_listing("\n".join(out) + "\n")
