"""Speculative-execution gadget detection over parsed listings.

Type-I gadgets are paths from the enclave entry point to an indirect jump,
indirect call, or near return with attacker-derived register values still
live. Type-II gadgets are short windows where a value loaded through one
attacker register feeds the address of a second memory access.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from . import asm, replay, symex
from .symex import Engine, EntryModel, ExplorationConfig, GP64

TOOL_VERSION = "0.1.0"

_CATEGORY = {
    asm.NEAR_RETURN: "return",
    asm.INDIRECT_JUMP: "indirect-jump",
    asm.INDIRECT_CALL: "indirect-call",
}

_REG_ORDER = {r: i for i, r in enumerate(GP64)}


def _reg_sort(names):
    return sorted(names, key=lambda r: _REG_ORDER[r])


@dataclass
class TypeIGadget:
    category: str
    symbol: str
    offset: int
    address: int
    controlled: tuple
    mode: str
    path_length: int
    trail: tuple = ()
    start: str | None = None

    @property
    def location(self):
        return f"{self.symbol}:0x{self.offset:x}" if self.symbol else f"0x{self.address:x}"


@dataclass
class TypeIIGadget:
    symbol: str
    offset: int
    address: int
    regA: str
    regB: str
    regC: str | None
    length: int
    instructions: tuple = ()

    @property
    def location(self):
        return f"{self.symbol}:0x{self.offset:x}" if self.symbol else f"0x{self.address:x}"

    @property
    def triple(self):
        regs = [self.regA, self.regB] + ([self.regC] if self.regC else [])
        return "[" + ", ".join(regs) + "]"


@dataclass(frozen=True)
class ScanConfig:
    window: int = 10
    second_classes: frozenset = frozenset({asm.LOAD, asm.STORE, asm.COMPARE,
                                           asm.REG_ARITH})
    regC_required: bool = False
    general_registers: frozenset = frozenset(r for r in GP64 if r != "rsp")

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")


# ---------------------------------------------------------------------------
# Type-I

def scan_type1(listing, em=EntryModel(), mode=symex.ECALL,
               cfg=ExplorationConfig(), start=None):
    engine = Engine(listing, em, cfg)
    attacker = set(em.attacker_registers)
    found = {}

    def visitor(st, ins):
        key = (_CATEGORY[ins.klass], ins.address, mode)
        if key in found:
            return
        controlled = []
        for r in GP64:
            origins = symex.origins_in(st.regs[r], through_loads=False)
            if origins & attacker:
                controlled.append(r)
        if not controlled:
            return
        name, off = listing.symbol_at(ins.address)
        found[key] = TypeIGadget(
            category=key[0], symbol=name, offset=off, address=ins.address,
            controlled=tuple(_reg_sort(controlled)), mode=mode,
            path_length=st.step_count, trail=tuple(st.trail), start=start)

    summary = engine.explore(mode=mode, start=start, visitor=visitor)
    gadgets = sorted(found.values(), key=lambda g: (g.address, g.category))
    return gadgets, summary


def verify_type1(listing, em, gadget):
    """Differential replay check: subset of the reported registers whose
    final value actually varies with the attacker's initial registers."""
    return replay.controlled_registers_differ(
        listing, em, gadget.mode, gadget.trail, gadget.path_length,
        gadget.controlled, em.attacker_registers, start=gadget.start)


def score_type1(g: TypeIGadget) -> int:
    return len(g.controlled)


# ---------------------------------------------------------------------------
# Type-II

_WINDOW_BREAKERS = {asm.DIRECT_JUMP, asm.DIRECT_CALL, asm.INDIRECT_JUMP,
                    asm.INDIRECT_CALL, asm.NEAR_RETURN, asm.COND_BRANCH,
                    asm.ENCLU, asm.SERIALIZE, asm.UNSUPPORTED}


def _find_load_term(v):
    if v[0] == "e":
        if v[1] == "load":
            return v
        for a in v[2]:
            if isinstance(a, tuple):
                t = _find_load_term(a)
                if t is not None:
                    return t
    return None


def _second_reference(cfg, ins):
    if ins.klass not in cfg.second_classes:
        return None
    mems = ins.memory_operands()
    if not mems:
        return None
    return mems[0]


def scan_type2(listing, cfg=ScanConfig()):
    gadgets = []
    instructions = listing.instructions
    engine = Engine(listing, EntryModel(entry_symbol="\x00none"),
                    ExplorationConfig())
    for i, load in enumerate(instructions):
        if load.klass != asm.LOAD:
            continue
        if len(load.operands) != 2 or load.operands[1].kind != "reg":
            continue
        mem = load.operands[0]
        if mem.base is None or mem.base.name == "rip":
            continue
        regA = asm.registers.normalize_register(mem.base)[0]
        regB = asm.registers.normalize_register(load.operands[1].reg)[0]
        if regA not in cfg.general_registers or regB not in cfg.general_registers:
            continue
        g = _scan_window(engine, listing, cfg, i, regA, regB)
        if g is not None and (g.regC or not cfg.regC_required):
            gadgets.append(g)
    gadgets.sort(key=lambda g: g.address)
    return gadgets


def _scan_window(engine, listing, cfg, i, regA, regB):
    instructions = listing.instructions
    load = instructions[i]
    st = symex.MachineState(
        regs={r: (symex.conc(replay.STACK_TOP) if r == "rsp" else symex.sym(r))
              for r in GP64},
        flags=symex.CONCRETE_FLAGS_ZERO, mem={}, sym_stores=[],
        rip=load.address)
    engine.step(st)
    term = _find_load_term(st.regs[regB])
    if term is None:
        return None
    for j in range(i + 1, min(i + 1 + cfg.window, len(instructions))):
        ins = instructions[j]
        if ins.klass in _WINDOW_BREAKERS:
            return None
        memop = _second_reference(cfg, ins)
        if memop is not None:
            addr = engine.address_expr(st, memop)
            if symex.contains_term(addr, term):
                regC = _pick_regC(st, addr, regB, cfg)
                name, off = listing.symbol_at(load.address)
                seq = tuple(x.text or x.emit() for x in instructions[i:j + 1])
                return TypeIIGadget(symbol=name, offset=off,
                                    address=load.address, regA=regA,
                                    regB=regB, regC=regC, length=j - i + 1,
                                    instructions=seq)
        if st.status != "live":
            return None
        engine.step(st)
        if st.status != "live":
            return None
    return None


def _pick_regC(st, addr, regB, cfg):
    outside = symex.origins_in(addr, through_loads=False)
    candidates = [r for r in GP64
                  if r in outside and r != regB
                  and r in cfg.general_registers
                  and st.regs[r] == symex.sym(r)]
    return candidates[0] if candidates else None


def score_type2(g: TypeIIGadget):
    """Orderable score: gadgets with a live base register rank first, then
    shorter ones."""
    return (0 if g.regC else 1, g.length)


# ---------------------------------------------------------------------------
# reports

def emit_report(type1=(), type2=(), format="text-table", corpus_id=""):
    if format == "structured":
        doc = {
            "tool-version": TOOL_VERSION,
            "corpus-id": corpus_id,
            "type1": [
                {"category": g.category, "location": g.location,
                 "address": g.address, "mode": g.mode,
                 "controlled": list(g.controlled),
                 "path-length": g.path_length, "score": score_type1(g)}
                for g in type1
            ],
            "type2": [
                {"location": g.location, "address": g.address,
                 "regA": g.regA, "regB": g.regB, "regC": g.regC,
                 "length": g.length, "instructions": list(g.instructions)}
                for g in type2
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=False) + "\n"
    if format != "text-table":
        raise ValueError(f"unknown report format {format!r}")
    lines = []
    if type1 or not type2:
        lines.append("category | end | controlled registers | mode | score")
        for g in type1:
            lines.append(f"{g.category} | {g.location} | "
                         f"{', '.join(g.controlled)} | {g.mode} | {score_type1(g)}")
    if type2:
        if lines:
            lines.append("")
        lines.append("start | registers | length")
        for g in type2:
            lines.append(f"{g.location} | {g.triple} | {g.length}")
    return "\n".join(lines) + "\n"


def parse_report(text):
    return json.loads(text)
