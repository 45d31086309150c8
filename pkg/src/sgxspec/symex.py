"""Solver-free symbolic execution over parsed listings.

Tracks which registers and memory cells hold attacker-derived symbols along
explored paths. Branches on symbolic flags fork both ways; no feasibility
pruning is attempted. Values are immutable tagged tuples:

* ``("c", value)``    concrete 64-bit value
* ``("s", origin, n)`` symbol; origin is a register name or "havoc"
* ``("e", op, args)`` expression; op in {add, sub, mul, and, or, xor, shl,
  shr, sar, not, neg, ext, sext, load, byte}
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

from . import asm
from .asm import Listing, Instruction

MASK64 = 0xFFFF_FFFF_FFFF_FFFF

ECALL = "ecall"
ORET = "oret"

GP64 = ("rax", "rbx", "rcx", "rdx", "rsi", "rdi", "rbp", "rsp",
        "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15")

DEFAULT_ATTACKER_REGS = frozenset(
    ("rbx", "rcx", "rdx", "rsi", "rdi", "rbp",
     "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15"))


# ---------------------------------------------------------------------------
# symbolic values

def conc(v):
    return ("c", v & MASK64)


def sym(origin, n=0):
    return ("s", origin, n)


def is_conc(v):
    return v[0] == "c"


def _fold_binop(op, a, b):
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    if op == "and":
        return a & b
    if op == "or":
        return a | b
    if op == "xor":
        return a ^ b
    if op == "shl":
        return a << (b & 63)
    if op == "shr":
        return a >> (b & 63)
    if op == "sar":
        sa = a - (1 << 64) if a >> 63 else a
        return sa >> (b & 63)
    raise ValueError(op)


def mk(op, *args):
    """Build an expression, folding constants and easy identities."""
    if op in ("not", "neg"):
        (v,) = args
        if is_conc(v):
            x = v[1]
            return conc(~x if op == "not" else -x)
        return ("e", op, (v,))
    if op == "ext":
        v, bits = args
        if bits >= 64:
            return v
        if is_conc(v):
            return conc(v[1] & ((1 << bits) - 1))
        if v[0] == "e" and v[2:] and v[1] == "ext":
            inner, ibits = v[2]
            return mk("ext", inner, min(bits, ibits))
        # a pure high-half value extracts to zero
        if (v[0] == "e" and v[1] == "shl" and is_conc(v[2][1])
                and v[2][1][1] >= bits):
            return conc(0)
        # or(shl(x, k), c) with k >= bits and c < 2^bits extracts to c;
        # this keeps a pinned selector in the low half of a register
        # concrete while the high half stays symbolic.
        if v[0] == "e" and v[1] == "or":
            lo = hi = None
            for part in v[2]:
                if is_conc(part) and part[1] < (1 << bits):
                    lo = part
                elif (part[0] == "e" and part[1] == "shl"
                      and is_conc(part[2][1]) and part[2][1][1] >= bits):
                    hi = part
            if lo is not None and hi is not None and len(v[2]) == 2:
                return lo
        return ("e", "ext", (v, bits))
    if op == "sext":
        v, bits = args
        if bits >= 64:
            return v
        if is_conc(v):
            x = v[1] & ((1 << bits) - 1)
            if x >> (bits - 1):
                x -= 1 << bits
            return conc(x)
        return ("e", "sext", (v, bits))
    if op == "load":
        addr, width, seq = args
        return ("e", "load", (addr, width, seq))
    if op == "byte":
        v, i = args
        if is_conc(v):
            return conc((v[1] >> (8 * i)) & 0xFF)
        return ("e", "byte", (v, i))

    a, b = args
    if is_conc(a) and is_conc(b):
        return conc(_fold_binop(op, a[1], b[1]))
    if op in ("xor", "sub") and a == b:
        return conc(0)
    if op in ("add", "or", "xor") and is_conc(b) and b[1] == 0:
        return a
    if op in ("add", "or", "xor") and is_conc(a) and a[1] == 0:
        return b
    if op in ("shl", "shr", "sar", "sub") and is_conc(b) and b[1] == 0:
        return a
    if op == "mul" and is_conc(b):
        if b[1] == 0:
            return conc(0)
        if b[1] == 1:
            return a
    if op == "mul" and is_conc(a):
        if a[1] == 0:
            return conc(0)
        if a[1] == 1:
            return b
    if op == "and" and (a == conc(0) or b == conc(0)):
        return conc(0)
    return ("e", op, (a, b))


def depends_on(v, origin, through_loads=True):
    """True iff a symbol with the given origin appears in v's tree."""
    if v[0] == "c":
        return False
    if v[0] == "s":
        return v[1] == origin
    op, args = v[1], v[2]
    if op == "load":
        if not through_loads:
            return False
        return depends_on(args[0], origin, through_loads)
    return any(depends_on(a, origin, through_loads)
               for a in args if isinstance(a, tuple))


def origins_in(v, through_loads=True, out=None):
    """Set of symbol origins appearing in v's tree."""
    if out is None:
        out = set()
    if v[0] == "c":
        return out
    if v[0] == "s":
        out.add(v[1])
        return out
    op, args = v[1], v[2]
    if op == "load" and not through_loads:
        return out
    targets = (args[0],) if op == "load" else args
    for a in targets:
        if isinstance(a, tuple):
            origins_in(a, through_loads, out)
    return out


def contains_term(v, term):
    """True iff the exact subexpression `term` appears in v's tree."""
    if v == term:
        return True
    if v[0] != "e":
        return False
    return any(contains_term(a, term) for a in v[2] if isinstance(a, tuple))


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class EntryModel:
    entry_symbol: str = "enclave_entry"
    selector_register: str = "edi"
    ecall_selector: int = 0x0
    oret_selector: int = 0xFFFF_FFFF
    ocall_symbol: str = "sgx_ocall"
    attacker_registers: frozenset = DEFAULT_ATTACKER_REGS

    @classmethod
    def from_mapping(cls, kv):
        kw = {}
        if "entry-symbol" in kv:
            kw["entry_symbol"] = kv["entry-symbol"]
        if "selector-register" in kv:
            kw["selector_register"] = kv["selector-register"]
        if "ecall-selector" in kv:
            kw["ecall_selector"] = int(kv["ecall-selector"], 0)
        if "oret-selector" in kv:
            kw["oret_selector"] = int(kv["oret-selector"], 0)
        if "ocall-symbol" in kv:
            kw["ocall_symbol"] = kv["ocall-symbol"]
        if "attacker-registers" in kv:
            kw["attacker_registers"] = frozenset(
                r.strip() for r in kv["attacker-registers"].split(",") if r.strip())
        return cls(**kw)


@dataclass(frozen=True)
class ExplorationConfig:
    max_steps: int = 50_000
    max_fork_depth: int = 64
    loop_bound: int = 8
    max_states: int = 20_000

    def __post_init__(self):
        for f in (self.max_steps, self.max_fork_depth, self.loop_bound, self.max_states):
            if f <= 0:
                raise ValueError("exploration bounds must be positive")

    @classmethod
    def from_mapping(cls, kv):
        kw = {}
        for name in ("max_steps", "max_fork_depth", "loop_bound", "max_states"):
            key = name.replace("_", "-")
            if key in kv:
                kw[name] = int(kv[key], 0)
        return cls(**kw)


STACK_TOP = 0x7FFF_F000
STACK_FILL = 0xCC
ENCLAVE_FILL = 0x00


# ---------------------------------------------------------------------------
# machine state

@dataclass
class MachineState:
    regs: dict
    flags: tuple                     # (kind, lhs, rhs, width-bits)
    mem: dict                        # concrete byte address -> byte SymValue
    sym_stores: list
    rip: int = 0
    call_depth: int = 0
    step_count: int = 0
    fork_depth: int = 0
    trail: list = field(default_factory=list)
    mode: str = ECALL
    loop_counts: dict = field(default_factory=dict)
    visited_entry: bool = False
    status: str = "live"             # live | done | dead-end | budget
    note: str = ""

    def clone(self):
        return MachineState(
            regs=dict(self.regs), flags=self.flags, mem=dict(self.mem),
            sym_stores=list(self.sym_stores), rip=self.rip,
            call_depth=self.call_depth, step_count=self.step_count,
            fork_depth=self.fork_depth, trail=list(self.trail),
            mode=self.mode, loop_counts=dict(self.loop_counts),
            visited_entry=self.visited_entry, status=self.status)


CONCRETE_FLAGS_ZERO = ("cmp", conc(0), conc(0), 64)


@dataclass
class ExploreSummary:
    explored: int = 0
    pruned: int = 0
    dead_ends: int = 0
    completed: int = 0
    visits: int = 0
    capped: bool = False


class Engine:
    """Symbolic executor over one immutable Listing."""

    def __init__(self, listing: Listing, em: EntryModel = EntryModel(),
                 cfg: ExplorationConfig = ExplorationConfig()):
        self.listing = listing
        self.em = em
        self.cfg = cfg
        self._seq = itertools.count(1)
        self._order = {ins.address: i for i, ins in enumerate(listing.instructions)}
        self.entry_addr = None
        if em.entry_symbol in listing.symbols:
            self.entry_addr = listing.symbols[em.entry_symbol]

    # -- memory background ---------------------------------------------------

    def background_byte(self, addr):
        for lo, hi, byte in self.listing.fills:
            if lo <= addr < hi:
                return byte
        for base, data in self.listing.secrets:
            if base <= addr < base + len(data):
                return data[addr - base]
        return ENCLAVE_FILL

    # -- state construction ---------------------------------------------------

    def init_state(self, mode=ECALL, start=None, attacker_registers=None):
        em = self.em
        if em.entry_symbol not in self.listing.symbols:
            raise asm.SymbolError(f"entry symbol {em.entry_symbol!r} not in listing")
        attacker = em.attacker_registers if attacker_registers is None else attacker_registers
        regs = {r: conc(0) for r in GP64}
        for r in attacker:
            regs[r] = sym(r)
        regs["rsp"] = conc(STACK_TOP)

        sel_reg = asm.registers.lookup(em.selector_register)
        sel_val = em.ecall_selector if mode == ECALL else em.oret_selector
        parent = sel_reg.name if sel_reg.width == 64 else \
            asm.registers.normalize_register(sel_reg)[0]
        if sel_reg.width == 64:
            regs[parent] = conc(sel_val)
        else:
            # low view pinned concrete, upper bits keep the attacker symbol
            bits = sel_reg.width
            if parent in attacker:
                regs[parent] = mk("or", mk("shl", sym(parent), conc(bits)),
                                  conc(sel_val & ((1 << bits) - 1)))
            else:
                regs[parent] = conc(sel_val & ((1 << bits) - 1))

        if mode == ORET and start is None:
            start = em.ocall_symbol
        if start is not None:
            rip = asm.resolve_symbol(self.listing, start)
        else:
            rip = self.entry_addr
        st = MachineState(regs=regs, flags=CONCRETE_FLAGS_ZERO, mem={},
                          sym_stores=[], rip=rip, mode=mode,
                          visited_entry=(rip == self.entry_addr))
        return st

    # -- operand evaluation ----------------------------------------------------

    def read_reg(self, st, reg):
        parent, _ = asm.registers.normalize_register(reg)
        val = st.regs[parent]
        if reg.width == 64:
            return val
        if reg.high8:
            return mk("ext", mk("shr", val, conc(8)), 8)
        return mk("ext", val, reg.width)

    def write_reg(self, st, reg, val):
        parent, sem = asm.registers.normalize_register(reg)
        if sem == "full-width":
            st.regs[parent] = val
        elif sem == "zero-extend-32":
            st.regs[parent] = mk("ext", val, 32)
        else:
            old = st.regs[parent]
            if reg.high8:
                lo, bits = 8, 8
            else:
                lo, bits = 0, reg.width
            mask = ((1 << bits) - 1) << lo
            st.regs[parent] = mk(
                "or", mk("and", old, conc(MASK64 ^ mask)),
                mk("shl", mk("ext", val, bits), conc(lo)))

    def address_expr(self, st, op):
        val = conc(op.disp)
        if op.base is not None:
            if op.base.name == "rip":
                # rip-relative: address of the *next* instruction
                idx = self._order.get(st.rip)
                nxt = (self.listing.instructions[idx + 1].address
                       if idx is not None and idx + 1 < len(self.listing.instructions)
                       else st.rip)
                val = mk("add", val, conc(nxt))
            else:
                val = mk("add", val, self.read_reg(st, op.base))
        if op.index is not None:
            val = mk("add", val, mk("mul", self.read_reg(st, op.index),
                                    conc(op.scale)))
        return val

    def load_mem(self, st, addr, width):
        if not is_conc(addr):
            return mk("load", addr, width, next(self._seq))
        base = addr[1]
        byts = []
        for i in range(width):
            b = st.mem.get((base + i) & MASK64)
            if b is None:
                b = conc(self.background_byte((base + i) & MASK64))
            byts.append(b)
        # reassemble: all concrete folds; consecutive byte-extracts of one
        # expression starting at offset 0 reconstruct the expression
        if all(is_conc(b) for b in byts):
            v = 0
            for i, b in enumerate(byts):
                v |= b[1] << (8 * i)
            return conc(v)
        first = byts[0]
        if (first[0] == "e" and first[1] == "byte" and first[2][1] == 0):
            src = first[2][0]
            if all(b == mk("byte", src, i) for i, b in enumerate(byts)):
                return mk("ext", src, width * 8) if width < 8 else src
        out = conc(0)
        for i, b in enumerate(byts):
            out = mk("or", out, mk("shl", b, conc(8 * i)))
        return out

    def store_mem(self, st, addr, val, width):
        if not is_conc(addr):
            st.sym_stores.append((st.rip, addr, val, width))
            return
        base = addr[1]
        for i in range(width):
            if is_conc(val):
                b = conc((val[1] >> (8 * i)) & 0xFF)
            else:
                b = mk("byte", val, i)
            st.mem[(base + i) & MASK64] = b

    def operand_value(self, st, op):
        if op.kind == "imm":
            return conc(op.imm)
        if op.kind == "reg":
            return self.read_reg(st, op.reg)
        return self.load_mem(st, self.address_expr(st, op), op.width)

    def operand_write(self, st, op, val):
        if op.kind == "reg":
            self.write_reg(st, op.reg, val)
        elif op.kind == "mem":
            self.store_mem(st, self.address_expr(st, op), val, op.width)
        else:
            raise ValueError("cannot write an immediate")

    # -- stepping ---------------------------------------------------------------

    def havoc(self, st, regname):
        st.regs[regname] = sym("havoc", next(self._seq))

    def _next_rip(self, st):
        idx = self._order.get(st.rip)
        if idx is None or idx + 1 >= len(self.listing.instructions):
            return None
        return self.listing.instructions[idx + 1].address

    def step(self, st: MachineState):
        """Execute one instruction; returns a list of successor states."""
        ins = self.listing.at(st.rip)
        if ins is None:
            st.status = "dead-end"
            st.note = f"rip 0x{st.rip:x} outside listing"
            return [st]
        st.step_count += 1
        if st.step_count > self.cfg.max_steps:
            st.status = "budget"
            st.note = "max_steps"
            return [st]
        nxt = self._next_rip(st)
        k = ins.klass
        ops = ins.operands

        if k in (asm.NOP, asm.SERIALIZE, asm.CACHE_FLUSH):
            pass
        elif k == asm.LEA:
            self.write_reg(st, ops[1].reg, self.address_expr(st, ops[0]))
        elif k == asm.LOAD:
            val = self.operand_value(st, ops[0])
            if ins.mnemonic in asm._MOVX:
                bits = asm._MOVX[ins.mnemonic][0] * 8
                val = mk("sext" if asm._MOVX[ins.mnemonic][1] else "ext", val, bits)
            self.write_reg(st, ops[1].reg, val)
        elif k == asm.STORE:
            val = self.operand_value(st, ops[0])
            self.operand_write(st, ops[1], val)
        elif k == asm.REG_ARITH:
            self._arith(st, ins)
        elif k == asm.COMPARE:
            a = self._op_view(st, ops[1]) if len(ops) > 1 else conc(0)
            b = self._op_view(st, ops[0])
            width = self._cmp_width(ops)
            kind = "test" if ins.mnemonic.startswith("test") else "cmp"
            st.flags = (kind, a, b, width)
        elif k == asm.PUSH:
            val = self.operand_value(st, ops[0])
            rsp = st.regs["rsp"]
            if not is_conc(rsp):
                st.status = "dead-end"
                st.note = "symbolic rsp"
                return [st]
            rsp = conc(rsp[1] - 8)
            st.regs["rsp"] = rsp
            self.store_mem(st, rsp, val, 8)
        elif k == asm.POP:
            rsp = st.regs["rsp"]
            if not is_conc(rsp):
                st.status = "dead-end"
                st.note = "symbolic rsp"
                return [st]
            val = self.load_mem(st, rsp, 8)
            st.regs["rsp"] = conc(rsp[1] + 8)
            self.operand_write(st, ops[0], val)
        elif k == asm.XCHG:
            a = self.operand_value(st, ops[0])
            b = self.operand_value(st, ops[1])
            self.operand_write(st, ops[0], b)
            self.operand_write(st, ops[1], a)
        elif k == asm.DIRECT_JUMP:
            return self._goto(st, ins.target)
        elif k == asm.COND_BRANCH:
            return self._cond_branch(st, ins, nxt)
        elif k == asm.DIRECT_CALL:
            if nxt is not None:
                rsp = st.regs["rsp"]
                if not is_conc(rsp):
                    st.status = "dead-end"
                    st.note = "symbolic rsp"
                    return [st]
                st.regs["rsp"] = conc(rsp[1] - 8)
                self.store_mem(st, st.regs["rsp"], conc(nxt), 8)
            st.call_depth += 1
            return self._goto(st, ins.target)
        elif k == asm.NEAR_RETURN:
            rsp = st.regs["rsp"]
            if not is_conc(rsp):
                st.status = "dead-end"
                st.note = "symbolic rsp"
                return [st]
            ret = self.load_mem(st, rsp, 8)
            st.regs["rsp"] = conc(rsp[1] + 8)
            st.call_depth -= 1
            if not is_conc(ret):
                st.status = "dead-end"
                st.note = "symbolic return address"
                return [st]
            return self._goto(st, ret[1])
        elif k in (asm.INDIRECT_JUMP, asm.INDIRECT_CALL):
            target = self.operand_value(st, ops[0])
            if k == asm.INDIRECT_CALL and nxt is not None:
                rsp = st.regs["rsp"]
                if not is_conc(rsp):
                    st.status = "dead-end"
                    st.note = "symbolic rsp"
                    return [st]
                st.regs["rsp"] = conc(rsp[1] - 8)
                self.store_mem(st, st.regs["rsp"], conc(nxt), 8)
                st.call_depth += 1
            if not is_conc(target):
                st.status = "dead-end"
                st.note = "symbolic branch target"
                return [st]
            return self._goto(st, target[1])
        elif k == asm.ENCLU:
            leaf = st.regs["rax"]
            if is_conc(leaf) and leaf[1] == 4:
                return self._eexit(st)
            self.havoc(st, "rax")
            st.flags = CONCRETE_FLAGS_ZERO
        else:  # unsupported: havoc outputs (operands were dropped at parse)
            self.havoc(st, "rax")
            st.flags = ("cmp", sym("havoc", next(self._seq)), conc(0), 64)

        if nxt is None:
            st.status = "done"
            st.note = "fell off listing end"
            return [st]
        st.rip = nxt
        return [st]

    def _eexit(self, st):
        """EEXIT: control returns to the host, which re-enters at the entry
        point; a path that has already traversed the entry is complete."""
        if st.visited_entry or self.entry_addr is None:
            st.status = "done"
            st.note = "eexit"
            return [st]
        st.visited_entry = True
        st.rip = self.entry_addr
        st.call_depth = 0
        return [st]

    def _goto(self, st, target):
        if self.listing.at(target) is None:
            st.status = "dead-end"
            st.note = f"branch target 0x{target:x} outside listing"
            return [st]
        if target == self.entry_addr:
            if st.visited_entry and st.call_depth <= 0:
                st.status = "done"
                st.note = "returned to entry"
                return [st]
            st.visited_entry = True
        st.rip = target
        return [st]

    def _op_view(self, st, op):
        return self.operand_value(st, op)

    @staticmethod
    def _cmp_width(ops):
        for op in ops:
            if op.kind == "reg":
                return op.reg.width
        for op in ops:
            if op.kind == "mem":
                return op.width * 8
        return 64

    _BINOPS = {
        "add": "add", "sub": "sub", "and": "and", "or": "or", "xor": "xor",
        "shl": "shl", "shr": "shr", "sar": "sar", "rol": None, "imul": "mul",
        "adc": "add", "sbb": "sub",
    }

    def _arith(self, st, ins):
        base = set(self._BINOPS) | {"not", "neg", "inc", "dec"}
        mnem = ins.mnemonic
        if mnem not in base and mnem[-1] in "qlwb" and mnem[:-1] in base:
            mnem = mnem[:-1]
        ops = ins.operands
        if ins.mnemonic in asm._MOV_MNEMONICS or ins.mnemonic in asm._MOVX:
            val = self.operand_value(st, ops[0])
            if ins.mnemonic in asm._MOVX:
                info = asm._MOVX[ins.mnemonic]
                val = mk("sext" if info[1] else "ext", val, info[0] * 8)
            self.operand_write(st, ops[1], val)
            return
        if mnem in ("not", "neg"):
            val = mk(mnem, self.operand_value(st, ops[0]))
            self.operand_write(st, ops[0], val)
            st.flags = ("test", val, conc(0), self._cmp_width(ops))
            return
        if mnem in ("inc", "dec"):
            val = mk("add" if mnem == "inc" else "sub",
                     self.operand_value(st, ops[0]), conc(1))
            self.operand_write(st, ops[0], val)
            st.flags = ("test", val, conc(0), self._cmp_width(ops))
            return
        if asm._CMOV_SET.match(ins.mnemonic):
            # conditional data movement: havoc the destination unless the
            # flags are concrete (then the move either happens or not)
            if self._flags_concrete(st):
                taken = self._eval_cond(st, ins.mnemonic[4 if ins.mnemonic.startswith("cmov") else 3:])
                if ins.mnemonic.startswith("set"):
                    self.operand_write(st, ops[-1], conc(1 if taken else 0))
                elif taken:
                    self.operand_write(st, ops[1], self.operand_value(st, ops[0]))
            else:
                if ops and ops[-1].kind == "reg":
                    parent, _ = asm.registers.normalize_register(ops[-1].reg)
                    self.havoc(st, parent)
            return
        op = self._BINOPS.get(mnem)
        if mnem == "rol":
            src = self.operand_value(st, ops[0])
            dst = self.operand_value(st, ops[1])
            w = self._cmp_width(ops)
            if is_conc(src) and is_conc(dst):
                s = src[1] % w
                x = dst[1] & ((1 << w) - 1)
                val = conc(((x << s) | (x >> (w - s))) & ((1 << w) - 1))
            else:
                val = mk("or", mk("shl", dst, src), mk("shr", dst, src))
            self.operand_write(st, ops[1], val)
            st.flags = ("test", val, conc(0), w)
            return
        if op is None:
            self.havoc(st, "rax")
            return
        if len(ops) == 1:  # e.g. one-operand imul
            val = mk(op, self.read_reg(st, asm.registers.lookup("rax")),
                     self.operand_value(st, ops[0]))
            self.write_reg(st, asm.registers.lookup("rax"), val)
            st.flags = ("test", val, conc(0), 64)
            return
        src = self.operand_value(st, ops[0])
        dst = self.operand_value(st, ops[1])
        val = mk(op, dst, src)
        self.operand_write(st, ops[1], val)
        st.flags = ("test", val, conc(0), self._cmp_width(ops))

    # -- flags / branching -------------------------------------------------------

    def _flags_concrete(self, st):
        _, a, b, _ = st.flags
        return is_conc(a) and is_conc(b)

    def _eval_cond(self, st, cond):
        kind, a, b, width = st.flags
        mask = (1 << width) - 1
        av, bv = a[1] & mask, b[1] & mask
        if kind == "test":
            res = av & bv if kind == "test" and b != conc(0) else av
            zf, cf = res == 0, False
            sf = bool(res >> (width - 1))
            of = False
        else:  # cmp a - b
            res = (av - bv) & mask
            zf = res == 0
            cf = av < bv
            sf = bool(res >> (width - 1))
            sa = av - (1 << width) if av >> (width - 1) else av
            sb = bv - (1 << width) if bv >> (width - 1) else bv
            of = not (-(1 << (width - 1)) <= sa - sb < (1 << (width - 1)))
        return evaluate_condition(cond, zf, cf, sf, of)

    def _cond_branch(self, st, ins, nxt):
        cond = ins.mnemonic[1:]
        if self._flags_concrete(st):
            taken = self._eval_cond(st, cond)
            st.trail.append((ins.address, taken))
            if taken:
                return self._goto(st, ins.target)
            if nxt is None:
                st.status = "done"
                return [st]
            st.rip = nxt
            return [st]
        # symbolic flags: fork both directions
        count = st.loop_counts.get(ins.address, 0)
        if count >= self.cfg.loop_bound:
            st.status = "budget"
            st.note = "loop bound"
            return [st]
        if st.fork_depth >= self.cfg.max_fork_depth:
            st.status = "budget"
            st.note = "fork depth"
            return [st]
        st.loop_counts[ins.address] = count + 1
        st.fork_depth += 1
        taken = st.clone()
        taken.trail.append((ins.address, True))
        st.trail.append((ins.address, False))
        out = []
        if nxt is None:
            st.status = "done"
        else:
            st.rip = nxt
        out.append(st)
        out.extend(self._goto(taken, ins.target))
        return out

    # -- exploration ----------------------------------------------------------

    def explore(self, mode=ECALL, start=None, visitor=None,
                attacker_registers=None):
        """Bounded LIFO path exploration; the visitor fires at every state
        whose next instruction is an indirect jump, indirect call, or near
        return."""
        summary = ExploreSummary()
        init = self.init_state(mode=mode, start=start,
                               attacker_registers=attacker_registers)
        work = [init]
        spawned = 1
        while work:
            st = work.pop()
            ins = self.listing.at(st.rip)
            if ins is not None and ins.klass in asm.BRANCH_ENDS and visitor:
                summary.visits += 1
                visitor(st, ins)
            succs = self.step(st)
            summary.explored += 1
            for s in succs:
                if s.status == "live":
                    if s is not st:
                        spawned += 1
                        if spawned > self.cfg.max_states:
                            s.status = "budget"
                            s.note = "max_states"
                            summary.pruned += 1
                            summary.capped = True
                            continue
                    work.append(s)
                elif s.status == "done":
                    summary.completed += 1
                elif s.status == "budget":
                    summary.pruned += 1
                else:
                    summary.dead_ends += 1
        return summary


def evaluate_condition(cond, zf, cf, sf, of):
    table = {
        "e": zf, "z": zf, "ne": not zf, "nz": not zf,
        "a": not cf and not zf, "ae": not cf, "nc": not cf,
        "b": cf, "c": cf, "be": cf or zf,
        "g": not zf and sf == of, "ge": sf == of,
        "l": sf != of, "le": zf or sf != of,
        "s": sf, "ns": not sf, "o": of, "no": not of,
    }
    if cond not in table:
        raise ValueError(f"unknown condition {cond!r}")
    return table[cond]
