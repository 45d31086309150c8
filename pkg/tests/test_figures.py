from sgxspec import figures, scan, symex
from sgxspec.harness import AttackResult


def test_attack_figure(tmp_path):
    result = AttackResult(recovered=[0xA7, None, 0xC3],
                          expected=[0xA7, 0x11, 0xC3],
                          attempts=[2, 8, 1])
    path = tmp_path / "attack.png"
    figures.save_attack_figure(result, str(path))
    assert path.stat().st_size > 0


def test_matrix_figure(tmp_path):
    rows = [("baseline", 1.0), ("ibrs", 0.0), ("retpoline+skylake", 1.0)]
    path = tmp_path / "matrix.png"
    figures.save_matrix_figure(rows, str(path))
    assert path.stat().st_size > 0


def test_scan_figure(tmp_path, sdk_listing, dlmalloc_listing):
    type1, _ = scan.scan_type1(sdk_listing, symex.EntryModel())
    type2 = scan.scan_type2(dlmalloc_listing)
    path = tmp_path / "scan.png"
    figures.save_scan_figure(type1, type2, str(path))
    assert path.stat().st_size > 0


def test_empty_scan_figure(tmp_path):
    path = tmp_path / "empty.png"
    figures.save_scan_figure((), (), str(path))
    assert path.stat().st_size > 0
