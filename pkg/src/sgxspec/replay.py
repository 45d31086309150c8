"""Concrete path replay for validating reported register control.

A reported register is only honest if replaying the same path with two
different values of the attacker's initial registers produces two different
values in that register at the gadget instruction. Replay forces every
conditional branch along the recorded trail (the symbolic engine does no
feasibility pruning, so the trail, not the flags, defines the path).
"""

from __future__ import annotations

from . import asm, registers
from .machine import MASK64, CPUState, Machine, Memory

STACK_TOP = 0x7FFF_F000


class OracleMismatch(RuntimeError):
    pass


def background_reader(listing):
    def read(addr):
        for lo, hi, byte in listing.fills:
            if lo <= addr < hi:
                return byte
        for base, data in listing.secrets:
            if base <= addr < base + len(data):
                return data[addr - base]
        return 0
    return read


def canary_values(regs, flip=False):
    """Deterministic per-register canaries.

    The flipped set perturbs each register with a distinct key so that even
    linear combinations of two attacker registers change between the runs.
    """
    out = {}
    for i, r in enumerate(sorted(regs)):
        v = (0x0101_0101_0101_0101 * (i + 3)) & MASK64
        if flip:
            v ^= (0x9E37_79B9_7F4A_7C15 * (i + 1)) & MASK64
        out[r] = v
    return out


def initial_state(listing, em, mode, canary, start=None):
    st = CPUState()
    for r, v in canary.items():
        st.regs[r] = v & MASK64
    st.regs["rsp"] = STACK_TOP
    sel = registers.lookup(em.selector_register)
    sel_val = em.ecall_selector if mode == "ecall" else em.oret_selector
    parent, _ = registers.normalize_register(sel)
    mask = registers.view_mask(sel)
    st.regs[parent] = (st.regs[parent] & ~mask & MASK64) | \
        ((sel_val << (8 if sel.high8 else 0)) & mask)
    if mode == "oret" and start is None:
        start = em.ocall_symbol
    if start is not None:
        st.rip = asm.resolve_symbol(listing, start)
    else:
        st.rip = asm.resolve_symbol(listing, em.entry_symbol)
    return st


def replay(listing, em, mode, trail, steps, canary, start=None):
    """Execute `steps` instructions along the forced trail; returns CPUState."""
    mach = Machine(listing)
    mem = Memory(background=background_reader(listing))
    st = initial_state(listing, em, mode, canary, start)
    entry = listing.symbols.get(em.entry_symbol)
    visited_entry = st.rip == entry
    queue = list(trail)
    qi = 0
    for _ in range(steps):
        ins = listing.at(st.rip)
        if ins is None:
            raise OracleMismatch(f"replay left the listing at 0x{st.rip:x}")
        if ins.klass == asm.COND_BRANCH:
            if qi >= len(queue):
                raise OracleMismatch(f"trail exhausted at 0x{ins.address:x}")
            baddr, taken = queue[qi]
            qi += 1
            if baddr != ins.address:
                raise OracleMismatch(
                    f"trail branch 0x{baddr:x} but executing 0x{ins.address:x}")
            nxt = mach.next_addr(ins.address)
            st.rip = ins.target if taken else nxt
            if st.rip is None:
                raise OracleMismatch("fell off listing at forced branch")
            continue
        out = mach.execute(st, mem)
        if out.control == "enclu":
            if (out.target & MASK64) == 4:
                if visited_entry or entry is None:
                    break
                visited_entry = True
                st.rip = entry
                continue
            st.regs["rax"] = 0
            continue
        if out.control == "halt":
            break
        if st.rip == entry:
            visited_entry = True
    return st


def controlled_registers_differ(listing, em, mode, trail, steps, regs,
                                attacker_regs, start=None):
    """Return the subset of `regs` whose value at the end of the replayed
    path differs between two canary assignments of the attacker registers."""
    a = replay(listing, em, mode, trail, steps,
               canary_values(attacker_regs, flip=False), start)
    b = replay(listing, em, mode, trail, steps,
               canary_values(attacker_regs, flip=True), start)
    return {r for r in regs if a.regs[r] != b.regs[r]}
