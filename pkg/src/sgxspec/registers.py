"""x86-64 general-purpose register identities and sub-register views.

Every register token normalizes to exactly one 64-bit parent.  Writes
through a 32-bit view zero the upper half of the parent; 8- and 16-bit
views merge into the existing value.
"""

from __future__ import annotations

from dataclasses import dataclass

GP64 = (
    "rax", "rbx", "rcx", "rdx", "rsi", "rdi", "rbp", "rsp",
    "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15",
)

ALL64 = GP64 + ("rip",)

# 64-bit parent -> (32, 16, low-8) view names.
_VIEWS = {
    "rax": ("eax", "ax", "al"),
    "rbx": ("ebx", "bx", "bl"),
    "rcx": ("ecx", "cx", "cl"),
    "rdx": ("edx", "dx", "dl"),
    "rsi": ("esi", "si", "sil"),
    "rdi": ("edi", "di", "dil"),
    "rbp": ("ebp", "bp", "bpl"),
    "rsp": ("esp", "sp", "spl"),
}
for _n in range(8, 16):
    _VIEWS[f"r{_n}"] = (f"r{_n}d", f"r{_n}w", f"r{_n}b")

# high-8 views merge like the 8/16-bit ones but shifted by 8 bits
_HIGH8 = {"ah": "rax", "bh": "rbx", "ch": "rcx", "dh": "rdx"}


@dataclass(frozen=True)
class Register:
    """A register token: 64-bit parent identity plus the view width in bits."""

    name: str       # parent name, always one of ALL64
    width: int      # 8, 16, 32 or 64
    high8: bool = False

    def __str__(self):
        if self.width == 64:
            return self.name
        if self.high8:
            return {v: k for k, v in _HIGH8.items()}[self.name]
        views = _VIEWS[self.name]
        return {32: views[0], 16: views[1], 8: views[2]}[self.width]


_TOKEN_TABLE: dict[str, Register] = {}
for _parent in GP64:
    _TOKEN_TABLE[_parent] = Register(_parent, 64)
    _e, _w, _b = _VIEWS[_parent]
    _TOKEN_TABLE[_e] = Register(_parent, 32)
    _TOKEN_TABLE[_w] = Register(_parent, 16)
    _TOKEN_TABLE[_b] = Register(_parent, 8)
for _tok, _parent in _HIGH8.items():
    _TOKEN_TABLE[_tok] = Register(_parent, 8, high8=True)
_TOKEN_TABLE["rip"] = Register("rip", 64)


def lookup(token: str) -> Register | None:
    """Map a bare register token (no '%') to a Register, or None."""
    return _TOKEN_TABLE.get(token)


def normalize_register(r: Register) -> tuple[str, str]:
    """Return (parent-name, write-semantics) for a register view.

    Write semantics is one of ``full-width``, ``zero-extend-32`` or
    ``merge`` (8/16-bit views, which leave the rest of the parent alone).
    """
    if r.width == 64:
        return r.name, "full-width"
    if r.width == 32:
        return r.name, "zero-extend-32"
    return r.name, "merge"


def view_mask(r: Register) -> int:
    if r.width == 64:
        return 0xFFFF_FFFF_FFFF_FFFF
    return (1 << r.width) - 1


def read_view(value64: int, r: Register) -> int:
    """Extract a view's bits from a 64-bit parent value."""
    if r.high8:
        return (value64 >> 8) & 0xFF
    return value64 & view_mask(r)


def write_view(old64: int, r: Register, value: int) -> int:
    """Apply a write through a view to the 64-bit parent value."""
    value &= view_mask(r)
    if r.width == 64:
        return value
    if r.width == 32:
        return value                      # upper 32 bits zeroed
    if r.high8:
        return (old64 & ~0xFF00) | (value << 8)
    return (old64 & ~view_mask(r)) | value
