"""Parser for textual x86-64 disassembly listings (AT&T syntax).

The grammar is one construct per line:

* symbol header   ``0000000000003662 <enclave_entry>:``
* instruction     ``3627:  c3  retq`` (hex bytes optional)
* directive       ``.enclave LO HI``, ``.entry SYM``, ``.secret ADDR "hex"``,
  ``.ssa ADDR``, ``.tcs ADDR``, ``.fill LO HI BYTE`` (simulator dialect)
* ``#`` starts a comment; blank lines are ignored.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from . import registers
from .registers import Register

ADDR_MASK = (1 << 48) - 1


class ParseError(ValueError):
    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


class SymbolError(KeyError):
    pass


# instruction classes
LOAD = "load"
STORE = "store"
REG_ARITH = "reg-arith"
LEA = "lea"
COMPARE = "compare"
DIRECT_CALL = "direct-call"
NEAR_RETURN = "near-return"
INDIRECT_JUMP = "indirect-jump"
INDIRECT_CALL = "indirect-call"
COND_BRANCH = "cond-branch"
DIRECT_JUMP = "direct-jump"
PUSH = "push"
POP = "pop"
XCHG = "xchg"
SERIALIZE = "serialize"
CACHE_FLUSH = "cache-flush"
ENCLU = "enclu"
NOP = "nop"
UNSUPPORTED = "unsupported"

BRANCH_ENDS = (INDIRECT_JUMP, INDIRECT_CALL, NEAR_RETURN)

_MOV_MNEMONICS = {"mov", "movq", "movl", "movw", "movb", "movabs", "movabsq"}
_MOVX = {
    # mnemonic -> (source width bytes, sign-extend)
    "movzbl": (1, False), "movzbq": (1, False), "movzbw": (1, False),
    "movzwl": (2, False), "movzwq": (2, False),
    "movsbl": (1, True), "movsbq": (1, True),
    "movswl": (2, True), "movswq": (2, True),
    "movslq": (4, True), "movsxd": (4, True),
}
_ARITH = {
    "add", "addq", "addl", "sub", "subq", "subl", "and", "andq", "andl",
    "or", "orq", "orl", "xor", "xorq", "xorl", "shl", "shlq", "shr", "shrq",
    "sar", "sarq", "rol", "rolq", "imul", "imulq", "not", "notq", "neg",
    "negq", "inc", "incq", "dec", "decq", "adc", "sbb",
}
_CMOV_SET = re.compile(r"^(cmov|set)[a-z]{1,3}$")
_COMPARE = {"cmp", "cmpq", "cmpl", "cmpw", "cmpb", "test", "testq", "testl", "testb"}
_COND = {
    "je", "jne", "jz", "jnz", "ja", "jae", "jb", "jbe", "jg", "jge",
    "jl", "jle", "js", "jns", "jc", "jnc", "jo", "jno",
}
_SUFFIX_WIDTH = {"b": 1, "w": 2, "l": 4, "q": 8}

_SYMBOL_RE = re.compile(r"^([0-9a-fA-F]+)\s+<([^>]+)>:$")
_INSTR_RE = re.compile(r"^([0-9a-fA-F]+):\s*(.*)$")
_HEXBYTES_RE = re.compile(r"^((?:[0-9a-f]{2}\s+)+)(?=[a-z.])")
_TARGET_RE = re.compile(r"^([0-9a-fA-F]+)(?:\s+<[^>]*>)?$")
_MEM_RE = re.compile(r"^(-?(?:0x[0-9a-fA-F]+|\d+))?\(([^)]*)\)$")


@dataclass(frozen=True)
class Operand:
    kind: str                       # "imm" | "reg" | "mem"
    imm: int | None = None
    reg: Register | None = None
    base: Register | None = None
    index: Register | None = None
    scale: int = 1
    disp: int = 0
    width: int = 8                  # memory access width in bytes

    def __str__(self):
        if self.kind == "imm":
            return f"$0x{self.imm:x}"
        if self.kind == "reg":
            return f"%{self.reg}"
        parts = ""
        if self.disp:
            parts += f"-0x{-self.disp:x}" if self.disp < 0 else f"0x{self.disp:x}"
        if self.base is None and self.index is None:
            return parts or "0x0"
        inner = f"%{self.base}" if self.base else ""
        if self.index is not None:
            inner += f",%{self.index},{self.scale}"
        return f"{parts}({inner})"


def imm_op(value):
    return Operand("imm", imm=value)


def reg_op(r):
    return Operand("reg", reg=r)


def mem_op(base=None, index=None, scale=1, disp=0, width=8):
    return Operand("mem", base=base, index=index, scale=scale, disp=disp, width=width)


@dataclass(frozen=True)
class Instruction:
    address: int
    klass: str
    mnemonic: str
    operands: tuple[Operand, ...]
    text: str = ""

    @property
    def target(self) -> int | None:
        """Resolved target address for direct jumps/calls/branches."""
        if self.klass in (DIRECT_CALL, DIRECT_JUMP, COND_BRANCH) and self.operands:
            return self.operands[0].imm
        return None

    def memory_operands(self):
        return [op for op in self.operands if op.kind == "mem"]

    def emit(self) -> str:
        ops = ", ".join(str(op) for op in self.operands)
        star = "*" if self.klass in (INDIRECT_JUMP, INDIRECT_CALL) else ""
        if self.klass in (DIRECT_CALL, DIRECT_JUMP, COND_BRANCH):
            ops = f"{self.operands[0].imm:x}"
        return f"{self.address:x}: {self.mnemonic} {star}{ops}".rstrip()


@dataclass
class Listing:
    symbols: dict[str, int] = field(default_factory=dict)
    instructions: list[Instruction] = field(default_factory=list)
    enclave_range: tuple[int, int] | None = None
    entry_symbol: str | None = None
    secrets: list[tuple[int, bytes]] = field(default_factory=list)
    ssa_base: int | None = None
    tcs: int | None = None
    fills: list[tuple[int, int, int]] = field(default_factory=list)
    _by_addr: dict[int, Instruction] = field(default_factory=dict, repr=False)

    def at(self, address: int) -> Instruction | None:
        return self._by_addr.get(address)

    def index_of(self, address: int) -> int:
        for i, ins in enumerate(self.instructions):
            if ins.address == address:
                return i
        raise SymbolError(f"no instruction at 0x{address:x}")

    def symbol_at(self, address: int) -> tuple[str, int]:
        """Nearest preceding symbol and offset, for function+offset reporting."""
        best = None
        for name, start in self.symbols.items():
            if start <= address and (best is None or start > best[1]):
                best = (name, start)
        if best is None:
            return ("", address)
        return (best[0], address - best[1])

    def emit(self) -> str:
        lines = []
        if self.enclave_range:
            lines.append(f".enclave 0x{self.enclave_range[0]:x} 0x{self.enclave_range[1]:x}")
        if self.entry_symbol:
            lines.append(f".entry {self.entry_symbol}")
        if self.tcs is not None:
            lines.append(f".tcs 0x{self.tcs:x}")
        if self.ssa_base is not None:
            lines.append(f".ssa 0x{self.ssa_base:x}")
        for addr, data in self.secrets:
            lines.append(f'.secret 0x{addr:x} "{data.hex()}"')
        for lo, hi, byte in self.fills:
            lines.append(f".fill 0x{lo:x} 0x{hi:x} 0x{byte:x}")
        starts = {addr: name for name, addr in self.symbols.items()}
        for ins in self.instructions:
            if ins.address in starts:
                lines.append(f"{ins.address:016x} <{starts[ins.address]}>:")
            lines.append(ins.emit())
        return "\n".join(lines) + "\n"


def _parse_int(tok, lineno):
    try:
        return int(tok, 0)
    except ValueError:
        raise ParseError(f"bad integer {tok!r}", lineno)


def _parse_register(tok, lineno):
    if not tok.startswith("%"):
        raise ParseError(f"expected register, got {tok!r}", lineno)
    r = registers.lookup(tok[1:])
    if r is None:
        raise ParseError(f"unknown register {tok!r}", lineno)
    return r


def _split_operands(text):
    """Split an operand list on commas that are not inside parentheses."""
    parts, depth, cur = [], 0, ""
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append(cur.strip())
            cur = ""
        else:
            cur += ch
    if cur.strip():
        parts.append(cur.strip())
    return parts


def _parse_operand(tok, width, lineno):
    if tok.startswith("$"):
        return imm_op(_parse_int(tok[1:], lineno) & 0xFFFF_FFFF_FFFF_FFFF)
    if tok.startswith("%"):
        return reg_op(_parse_register(tok, lineno))
    m = _MEM_RE.match(tok)
    if m:
        disp = _parse_int(m.group(1), lineno) if m.group(1) else 0
        inner = [p.strip() for p in m.group(2).split(",")]
        base = index = None
        scale = 1
        if inner and inner[0]:
            base = _parse_register(inner[0], lineno)
        if len(inner) >= 2 and inner[1]:
            index = _parse_register(inner[1], lineno)
        if len(inner) >= 3 and inner[2]:
            scale = _parse_int(inner[2], lineno)
            if scale not in (1, 2, 4, 8):
                raise ParseError(f"bad scale {scale}", lineno)
        if index is None and len(inner) >= 3:
            raise ParseError("scale without index", lineno)
        return mem_op(base, index, scale, disp, width)
    # bare absolute address (displacement-only memory operand)
    if re.match(r"^-?(0x[0-9a-fA-F]+|\d+)$", tok):
        addr = _parse_int(tok, lineno)
        if addr > ADDR_MASK:
            raise ParseError(f"address 0x{addr:x} exceeds 48-bit virtual space", lineno)
        return mem_op(disp=addr, width=width)
    raise ParseError(f"unparsable operand {tok!r}", lineno)


def _operand_width(mnemonic, ops_text, operands):
    for op in operands:
        if op.kind == "reg":
            return max(op.reg.width // 8, 1)
    w = _SUFFIX_WIDTH.get(mnemonic[-1])
    return w if w else 8


def _classify(mnemonic, operands, indirect, lineno):
    if mnemonic in ("ret", "retq"):
        return NEAR_RETURN
    if mnemonic in ("call", "callq"):
        return INDIRECT_CALL if indirect else DIRECT_CALL
    if mnemonic in ("jmp", "jmpq"):
        return INDIRECT_JUMP if indirect else DIRECT_JUMP
    if mnemonic in _COND:
        return COND_BRANCH
    if mnemonic in ("lfence", "mfence", "sfence"):
        return SERIALIZE
    if mnemonic in ("clflush", "clflushopt"):
        return CACHE_FLUSH
    if mnemonic == "enclu":
        return ENCLU
    if mnemonic.startswith("nop"):
        return NOP
    if mnemonic in ("push", "pushq"):
        return PUSH
    if mnemonic in ("pop", "popq"):
        return POP
    if mnemonic in ("xchg", "xchgq"):
        return XCHG
    if mnemonic in ("lea", "leaq"):
        return LEA
    if mnemonic in _COMPARE:
        return COMPARE
    if mnemonic in _MOV_MNEMONICS or mnemonic in _MOVX:
        if operands and operands[0].kind == "mem":
            return LOAD
        if len(operands) == 2 and operands[1].kind == "mem":
            return STORE
        return REG_ARITH
    if mnemonic in _ARITH or _CMOV_SET.match(mnemonic):
        return REG_ARITH
    return UNSUPPORTED


def parse_instruction_line(address, body, lineno=0, text=""):
    body = body.strip()
    m = _HEXBYTES_RE.match(body + " ")
    if m:
        body = body[m.end():].strip()
    if not body:
        raise ParseError("instruction line with no mnemonic", lineno)
    parts = body.split(None, 1)
    mnemonic = parts[0]
    ops_text = parts[1].strip() if len(parts) > 1 else ""

    indirect = ops_text.startswith("*")
    if indirect:
        ops_text = ops_text[1:].strip()

    # direct branch targets: "callq 1f20 <enter_enclave>"
    if mnemonic in ("call", "callq", "jmp", "jmpq") or mnemonic in _COND:
        if not indirect:
            m = _TARGET_RE.match(ops_text)
            if not m:
                raise ParseError(f"bad branch target {ops_text!r}", lineno)
            target = int(m.group(1), 16)
            if target > ADDR_MASK:
                raise ParseError(f"address 0x{target:x} exceeds 48-bit virtual space", lineno)
            klass = _classify(mnemonic, (), False, lineno)
            return Instruction(address, klass, mnemonic, (imm_op(target),), text)

    raw = _split_operands(ops_text) if ops_text else []
    # probe for a register operand first so memory widths are right
    probe = []
    for tok in raw:
        if tok.startswith("%"):
            probe.append(reg_op(_parse_register(tok, lineno)))
    if mnemonic in _MOVX:
        width = _MOVX[mnemonic][0]
    else:
        width = _operand_width(mnemonic, ops_text, probe)
    operands = tuple(_parse_operand(tok, width, lineno) for tok in raw)
    klass = _classify(mnemonic, operands, indirect, lineno)
    if klass == UNSUPPORTED:
        operands = ()
    return Instruction(address, klass, mnemonic, operands, text)


def parse_listing(text: str) -> Listing:
    """Parse a disassembly listing (plus simulator directives) into a Listing."""
    listing = Listing()
    last_addr = -1
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        line = line.strip()

        if line.startswith("."):
            _parse_directive(line, listing, lineno)
            continue

        m = _SYMBOL_RE.match(line)
        if m:
            addr = int(m.group(1), 16)
            if addr > ADDR_MASK:
                raise ParseError(f"address 0x{addr:x} exceeds 48-bit virtual space", lineno)
            listing.symbols[m.group(2)] = addr
            continue

        m = _INSTR_RE.match(line)
        if not m:
            raise ParseError(f"no address prefix: {line!r}", lineno)
        addr = int(m.group(1), 16)
        if addr > ADDR_MASK:
            raise ParseError(f"address 0x{addr:x} exceeds 48-bit virtual space", lineno)
        if addr in listing._by_addr:
            raise ParseError(f"duplicate address 0x{addr:x}", lineno)
        if addr <= last_addr:
            raise ParseError(f"address 0x{addr:x} not increasing", lineno)
        ins = parse_instruction_line(addr, m.group(2), lineno, text=line)
        listing.instructions.append(ins)
        listing._by_addr[addr] = ins
        last_addr = addr

    for name, start in listing.symbols.items():
        if start not in listing._by_addr:
            raise ParseError(f"symbol {name} at 0x{start:x} has no instruction")
    return listing


def _parse_directive(line, listing, lineno):
    parts = line.split()
    kind = parts[0]
    try:
        if kind == ".enclave":
            listing.enclave_range = (int(parts[1], 0), int(parts[2], 0))
        elif kind == ".entry":
            listing.entry_symbol = parts[1]
        elif kind == ".secret":
            hexstr = parts[2].strip('"')
            listing.secrets.append((int(parts[1], 0), bytes.fromhex(hexstr)))
        elif kind == ".ssa":
            listing.ssa_base = int(parts[1], 0)
        elif kind == ".tcs":
            listing.tcs = int(parts[1], 0)
        elif kind == ".fill":
            listing.fills.append((int(parts[1], 0), int(parts[2], 0), int(parts[3], 0)))
        else:
            raise ParseError(f"unknown directive {kind}", lineno)
    except (IndexError, ValueError) as exc:
        raise ParseError(f"malformed directive {line!r}: {exc}", lineno)


_SYMREF_RE = re.compile(r"^(.*?)(?:\+(0x[0-9a-fA-F]+|\d+))?$")


def resolve_symbol(listing: Listing, ref: str) -> int:
    """Resolve "name" or "name+0xOFF" to an absolute address."""
    m = _SYMREF_RE.match(ref.strip())
    name = m.group(1)
    offset = int(m.group(2), 0) if m.group(2) else 0
    if name not in listing.symbols:
        raise SymbolError(f"unknown symbol {name!r}")
    return listing.symbols[name] + offset
