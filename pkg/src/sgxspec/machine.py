"""Concrete x86-64 interpreter over parsed listings.

Used as the architectural executor inside the microarchitectural simulator
and as the reference interpreter for the differential register-liveness
oracle. Deliberately independent of the symbolic engine: registers are plain
integers, flags are booleans, memory is a byte map with a background fill.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import asm, registers

MASK64 = 0xFFFF_FFFF_FFFF_FFFF

GP64 = ("rax", "rbx", "rcx", "rdx", "rsi", "rdi", "rbp", "rsp",
        "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15")


class Fault(Exception):
    """Raised by an access-check hook to abort an instruction."""

    def __init__(self, addr, kind="load"):
        super().__init__(f"fault at 0x{addr:x} ({kind})")
        self.addr = addr
        self.kind = kind


class Memory:
    """Sparse byte memory with a background fill and optional overlays."""

    def __init__(self, background=None, parent=None):
        self.data = {}
        self.background = background
        self.parent = parent

    def read_byte(self, addr):
        addr &= MASK64
        if addr in self.data:
            return self.data[addr]
        if self.parent is not None:
            return self.parent.read_byte(addr)
        if self.background is not None:
            return self.background(addr)
        return 0

    def write_byte(self, addr, value):
        self.data[addr & MASK64] = value & 0xFF

    def read(self, addr, width):
        return sum(self.read_byte(addr + i) << (8 * i) for i in range(width))

    def write(self, addr, value, width):
        for i in range(width):
            self.write_byte(addr + i, (value >> (8 * i)) & 0xFF)

    def overlay(self):
        """Child memory whose writes never reach this one (store buffering
        for transient execution; dropped on squash)."""
        return Memory(parent=self)


@dataclass
class CPUState:
    regs: dict = field(default_factory=lambda: {r: 0 for r in GP64})
    rip: int = 0
    zf: bool = False
    cf: bool = False
    sf: bool = False
    of: bool = False

    def copy(self):
        return CPUState(regs=dict(self.regs), rip=self.rip,
                        zf=self.zf, cf=self.cf, sf=self.sf, of=self.of)

    def read(self, reg):
        parent, _ = registers.normalize_register(reg)
        return registers.read_view(self.regs[parent], reg)

    def write(self, reg, value):
        parent, _ = registers.normalize_register(reg)
        self.regs[parent] = registers.write_view(
            self.regs[parent], reg, value)


@dataclass
class Outcome:
    next_rip: int | None
    control: str = "seq"       # seq | jump | call | ret | enclu | serialize | halt
    target: int | None = None
    taken: bool | None = None
    indirect: bool = False
    accesses: list = field(default_factory=list)   # (kind, addr, width)
    flushed: int | None = None
    zero_displacement_call: bool = False


def cond_true(cond, st: CPUState):
    zf, cf, sf, of = st.zf, st.cf, st.sf, st.of
    table = {
        "e": zf, "z": zf, "ne": not zf, "nz": not zf,
        "a": not cf and not zf, "ae": not cf, "nc": not cf,
        "b": cf, "c": cf, "be": cf or zf,
        "g": not zf and sf == of, "ge": sf == of,
        "l": sf != of, "le": zf or sf != of,
        "s": sf, "ns": not sf, "o": of, "no": not of,
    }
    return table[cond]


class Machine:
    """Executes one instruction at a time against a CPUState and Memory."""

    def __init__(self, listing: asm.Listing):
        self.listing = listing
        self._order = {ins.address: i for i, ins in enumerate(listing.instructions)}

    def next_addr(self, addr):
        idx = self._order.get(addr)
        if idx is None or idx + 1 >= len(self.listing.instructions):
            return None
        return self.listing.instructions[idx + 1].address

    # -- operand helpers -----------------------------------------------------

    def address_of(self, st, op, ins_addr):
        val = op.disp
        if op.base is not None:
            if op.base.name == "rip":
                nxt = self.next_addr(ins_addr)
                val += nxt if nxt is not None else ins_addr
            else:
                val += st.regs[op.base.name]
        if op.index is not None:
            val += st.read(op.index) * op.scale
        return val & MASK64

    def _read_operand(self, st, mem, op, ins_addr, out, check):
        if op.kind == "imm":
            return op.imm
        if op.kind == "reg":
            return st.read(op.reg)
        addr = self.address_of(st, op, ins_addr)
        if check:
            check(addr, op.width, "load")
        out.accesses.append(("load", addr, op.width))
        return mem.read(addr, op.width)

    def _write_operand(self, st, mem, op, value, ins_addr, out, check):
        if op.kind == "reg":
            st.write(op.reg, value)
            return
        addr = self.address_of(st, op, ins_addr)
        if check:
            check(addr, op.width, "store")
        out.accesses.append(("store", addr, op.width))
        mem.write(addr, value, op.width)

    @staticmethod
    def _width_bits(ops):
        for op in ops:
            if op.kind == "reg":
                return op.reg.width
        for op in ops:
            if op.kind == "mem":
                return op.width * 8
        return 64

    def _set_flags_cmp(self, st, a, b, width):
        mask = (1 << width) - 1
        a &= mask
        b &= mask
        res = (a - b) & mask
        st.zf = res == 0
        st.cf = a < b
        st.sf = bool(res >> (width - 1))
        sa = a - (1 << width) if a >> (width - 1) else a
        sb = b - (1 << width) if b >> (width - 1) else b
        st.of = not (-(1 << (width - 1)) <= sa - sb < (1 << (width - 1)))

    def _set_flags_result(self, st, res, width):
        mask = (1 << width) - 1
        res &= mask
        st.zf = res == 0
        st.sf = bool(res >> (width - 1))
        st.cf = False
        st.of = False

    # -- execution -------------------------------------------------------------

    def execute(self, st: CPUState, mem: Memory, check=None) -> Outcome:
        """Execute the instruction at st.rip; mutates st and mem.

        check(addr, width, kind) may raise Fault before any memory effect of
        that access happens. Returns the control-flow outcome.
        """
        ins = self.listing.at(st.rip)
        if ins is None:
            return Outcome(None, control="halt")
        addr = ins.address
        nxt = self.next_addr(addr)
        out = Outcome(nxt)
        k = ins.klass
        ops = ins.operands

        if k in (asm.NOP,):
            pass
        elif k == asm.SERIALIZE:
            out.control = "serialize"
        elif k == asm.CACHE_FLUSH:
            maddr = self.address_of(st, ops[0], addr)
            out.flushed = maddr
        elif k == asm.LEA:
            st.write(ops[1].reg, self.address_of(st, ops[0], addr))
        elif k in (asm.LOAD, asm.STORE) or (
                k == asm.REG_ARITH and (ins.mnemonic in asm._MOV_MNEMONICS
                                        or ins.mnemonic in asm._MOVX)):
            val = self._read_operand(st, mem, ops[0], addr, out, check)
            if ins.mnemonic in asm._MOVX:
                bits, signed = asm._MOVX[ins.mnemonic][0] * 8, asm._MOVX[ins.mnemonic][1]
                val &= (1 << bits) - 1
                if signed and val >> (bits - 1):
                    val -= 1 << bits
            self._write_operand(st, mem, ops[1], val & MASK64, addr, out, check)
        elif k == asm.REG_ARITH:
            self._arith(st, mem, ins, out, check)
        elif k == asm.COMPARE:
            b = self._read_operand(st, mem, ops[0], addr, out, check)
            a = self._read_operand(st, mem, ops[1], addr, out, check) if len(ops) > 1 else 0
            width = self._width_bits(ops)
            if ins.mnemonic.startswith("test"):
                self._set_flags_result(st, a & b, width)
            else:
                self._set_flags_cmp(st, a, b, width)
        elif k == asm.PUSH:
            val = self._read_operand(st, mem, ops[0], addr, out, check)
            rsp = (st.regs["rsp"] - 8) & MASK64
            if check:
                check(rsp, 8, "store")
            st.regs["rsp"] = rsp
            out.accesses.append(("store", rsp, 8))
            mem.write(rsp, val, 8)
        elif k == asm.POP:
            rsp = st.regs["rsp"]
            if check:
                check(rsp, 8, "load")
            out.accesses.append(("load", rsp, 8))
            val = mem.read(rsp, 8)
            st.regs["rsp"] = (rsp + 8) & MASK64
            self._write_operand(st, mem, ops[0], val, addr, out, check)
        elif k == asm.XCHG:
            a = self._read_operand(st, mem, ops[0], addr, out, check)
            b = self._read_operand(st, mem, ops[1], addr, out, check)
            self._write_operand(st, mem, ops[0], b, addr, out, check)
            self._write_operand(st, mem, ops[1], a, addr, out, check)
        elif k == asm.DIRECT_JUMP:
            out.control = "jump"
            out.target = ins.target
            out.next_rip = ins.target
        elif k == asm.COND_BRANCH:
            taken = cond_true(ins.mnemonic[1:], st)
            out.control = "jump"
            out.taken = taken
            out.target = ins.target if taken else nxt
            out.next_rip = out.target
        elif k in (asm.DIRECT_CALL, asm.INDIRECT_CALL):
            if k == asm.INDIRECT_CALL:
                target = self._read_operand(st, mem, ops[0], addr, out, check)
                out.indirect = True
            else:
                target = ins.target
                out.zero_displacement_call = (nxt is not None and target == nxt)
            rsp = (st.regs["rsp"] - 8) & MASK64
            if check:
                check(rsp, 8, "store")
            st.regs["rsp"] = rsp
            if nxt is not None:
                out.accesses.append(("store", rsp, 8))
                mem.write(rsp, nxt, 8)
            out.control = "call"
            out.target = target & MASK64
            out.next_rip = out.target
        elif k == asm.NEAR_RETURN:
            rsp = st.regs["rsp"]
            if check:
                check(rsp, 8, "load")
            out.accesses.append(("load", rsp, 8))
            target = mem.read(rsp, 8)
            st.regs["rsp"] = (rsp + 8) & MASK64
            out.control = "ret"
            out.indirect = True
            out.target = target
            out.next_rip = target
        elif k == asm.INDIRECT_JUMP:
            target = self._read_operand(st, mem, ops[0], addr, out, check)
            out.control = "jump"
            out.indirect = True
            out.target = target & MASK64
            out.next_rip = out.target
        elif k == asm.ENCLU:
            out.control = "enclu"
            out.target = st.regs["rax"]
        else:  # unsupported: deterministic havoc of rax and flags
            st.regs["rax"] = 0
            st.zf = st.cf = st.sf = st.of = False

        if out.control in ("seq", "serialize") and out.next_rip is None:
            out.control = "halt"
        if out.next_rip is not None:
            st.rip = out.next_rip
        return out

    _BINOPS = {"add", "sub", "and", "or", "xor", "shl", "shr", "sar",
               "imul", "adc", "sbb", "rol"}

    def _arith(self, st, mem, ins, out, check):
        addr = ins.address
        ops = ins.operands
        base = self._BINOPS | {"not", "neg", "inc", "dec"}
        mnem = ins.mnemonic
        if mnem not in base and mnem[-1] in "qlwb" and mnem[:-1] in base:
            mnem = mnem[:-1]
        width = self._width_bits(ops)
        mask = (1 << width) - 1
        if mnem in ("not", "neg"):
            val = self._read_operand(st, mem, ops[0], addr, out, check)
            res = (~val if mnem == "not" else -val) & mask
            self._write_operand(st, mem, ops[0], res, addr, out, check)
            self._set_flags_result(st, res, width)
            return
        if mnem in ("inc", "dec"):
            val = self._read_operand(st, mem, ops[0], addr, out, check)
            res = (val + (1 if mnem == "inc" else -1)) & mask
            self._write_operand(st, mem, ops[0], res, addr, out, check)
            self._set_flags_result(st, res, width)
            return
        if asm._CMOV_SET.match(ins.mnemonic):
            if ins.mnemonic.startswith("set"):
                taken = cond_true(ins.mnemonic[3:], st)
                self._write_operand(st, mem, ops[-1], 1 if taken else 0,
                                    addr, out, check)
            else:
                taken = cond_true(ins.mnemonic[4:], st)
                if taken:
                    val = self._read_operand(st, mem, ops[0], addr, out, check)
                    self._write_operand(st, mem, ops[1], val, addr, out, check)
            return
        if mnem not in self._BINOPS:
            st.regs["rax"] = 0
            return
        if len(ops) == 1:  # one-operand imul
            src = self._read_operand(st, mem, ops[0], addr, out, check)
            res = (st.regs["rax"] * src) & MASK64
            st.regs["rax"] = res
            self._set_flags_result(st, res, 64)
            return
        src = self._read_operand(st, mem, ops[0], addr, out, check)
        dst = self._read_operand(st, mem, ops[1], addr, out, check)
        if mnem == "add" or mnem == "adc":
            res = dst + src
        elif mnem == "sub" or mnem == "sbb":
            res = dst - src
        elif mnem == "and":
            res = dst & src
        elif mnem == "or":
            res = dst | src
        elif mnem == "xor":
            res = dst ^ src
        elif mnem == "shl":
            res = dst << (src & 63)
        elif mnem == "shr":
            res = (dst & mask) >> (src & 63)
        elif mnem == "sar":
            s = dst & mask
            if s >> (width - 1):
                s -= 1 << width
            res = s >> (src & 63)
        elif mnem == "rol":
            s = src % width
            x = dst & mask
            res = (x << s) | (x >> (width - s)) if s else x
        else:  # imul
            res = dst * src
        res &= mask
        self._write_operand(st, mem, ops[1], res, addr, out, check)
        if mnem == "sub":
            self._set_flags_cmp(st, dst, src, width)
        else:
            self._set_flags_result(st, res, width)
