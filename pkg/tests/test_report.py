import pytest

from residiff.report import REPORT_COLUMNS, ReportRow, emit_report, format_row


def test_header_columns():
    assert REPORT_COLUMNS == ("Method", "DSC (%)", "HD95 (mm)", "VS (%)")


def test_reference_row_formatting():
    row = ReportRow("reference", dsc=0.934, hd95=3.95, vs=0.957)
    assert format_row(row) == ("reference", "93.4", "3.95", "95.7")
    assert format_row(ReportRow("x", 0.5, None, 0.25)) == ("x", "50.0", "-", "25.0")


def test_emit_report_files(tmp_path):
    rows = [ReportRow("baseline", 0.81, 4.2, 0.9), ReportRow("refined", 0.88, 3.1, 0.95)]
    history = [
        {"stage": "seg", "epoch": 0, "l_seg": 1.0},
        {"stage": "seg", "epoch": 1, "l_seg": 0.7},
        {"stage": "joint", "epoch": 0, "l_seg": 0.5, "l_diff": 0.9, "l_total": 0.95},
    ]
    scatter = [(0.8, 0.85), (0.82, 0.9)]
    written = emit_report(rows, tmp_path, history=history, scatter=scatter)

    md = (tmp_path / "report.md").read_text()
    assert md.splitlines()[0] == "| Method | DSC (%) | HD95 (mm) | VS (%) |"
    assert "| refined | 88.0 | 3.10 | 95.0 |" in md
    assert (tmp_path / "report.csv").exists()
    assert written["loss_curves"].exists()
    assert written["scatter"].exists()


def test_empty_report_is_an_error_with_no_partial_files(tmp_path):
    out = tmp_path / "r"
    with pytest.raises(ValueError):
        emit_report([], out)
    assert not out.exists() or not any(out.iterdir())
