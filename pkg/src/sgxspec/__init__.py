"""Desk-scale laboratory for speculative-execution attacks on SGX-style
enclaves: a disassembly parser, a bounded symbolic explorer, gadget
scanners, a cycle-level microarchitectural simulator, and end-to-end
attack harnesses.
"""

from .asm import Listing, ParseError, SymbolError, parse_listing, resolve_symbol
from .config import (CPU_PRESETS, CountermeasureConfig, CPUModel,
                     LatencyConfig, cpu_model)
from .harness import (AttackPlan, AttackResult, MonitoredArray,
                      countermeasure_matrix, extract_region,
                      read_ssa_registers, run_scenario, steal_key_demo)
from .scan import (ScanConfig, TypeIGadget, TypeIIGadget, emit_report,
                   scan_type1, scan_type2, verify_type1)
from .symex import Engine, EntryModel, ExplorationConfig
from .uarch import BTB, RSB, CacheModel, Simulator, TranslationModel

__version__ = "0.1.0"
