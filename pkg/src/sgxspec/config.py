"""Latency, countermeasure, and CPU-model configuration.

Config files are plain ``key = value`` lines with ``#`` comments. Precedence
is defaults < config file < explicit overrides.
"""

from __future__ import annotations

from dataclasses import dataclass, replace, fields


@dataclass(frozen=True)
class LatencyConfig:
    l1: int = 4
    l2: int = 12
    llc: int = 40
    memory: int = 200
    cached_walk: int = 30
    memory_walk: int = 150

    @property
    def reload_threshold(self):
        """Hit/miss cut for Flush-Reload timing, from the active latencies."""
        return (self.l1 + self.memory) // 2


@dataclass(frozen=True)
class CountermeasureConfig:
    ibrs: bool = False
    stibp: bool = False
    ibpb_events: frozenset = frozenset()       # e.g. {"eenter"}
    retpoline: bool = False
    rsb_refill_on_enclave_entry: bool = False


@dataclass(frozen=True)
class CPUModel:
    name: str = "skylake"
    rsb_fallback_to_btb: bool = True
    btb_index_bits: int = 12
    rsb_entries: int = 16
    ret_poison_requires_exact_match: bool = True
    transient_depth: int = 64


CPU_PRESETS = {
    "skylake": CPUModel(name="skylake", rsb_fallback_to_btb=True),
    "pre-skylake": CPUModel(name="pre-skylake", rsb_fallback_to_btb=False),
}


def parse_config_text(text):
    """Parse `key = value` lines into a dict of strings."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, _, val = line.partition("=")
        out[key.strip()] = val.strip()
    return out


def load_config_file(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


_BOOL = {"1": True, "true": True, "on": True, "yes": True,
         "0": False, "false": False, "off": False, "no": False}


def _coerce(current, raw):
    if isinstance(current, bool):
        return _BOOL[raw.lower()]
    if isinstance(current, int):
        return int(raw, 0)
    if isinstance(current, frozenset):
        return frozenset(x.strip() for x in raw.split(",") if x.strip())
    return raw


def apply_overrides(cfg, kv, prefix=""):
    """Return cfg updated with any matching keys from the mapping.

    Keys use dashes (`memory-walk`); an optional prefix (`latency.`)
    namespaces them.
    """
    updates = {}
    for f in fields(cfg):
        key = prefix + f.name.replace("_", "-")
        if key in kv:
            updates[f.name] = _coerce(getattr(cfg, f.name), kv[key])
    return replace(cfg, **updates) if updates else cfg


def cpu_model(name, kv=None):
    if name not in CPU_PRESETS:
        raise ValueError(f"unknown cpu model {name!r}; "
                         f"choose from {sorted(CPU_PRESETS)}")
    model = CPU_PRESETS[name]
    if kv:
        model = apply_overrides(model, kv, prefix="cpu.")
    return model
