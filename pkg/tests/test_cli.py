from app.cli import main


def test_presets_list(capsys):
    assert main(["presets", "list"]) == 0
    out = capsys.readouterr().out
    assert "nccs" in out
    assert "toeplitz-interval" in out


def test_run_preset_and_report(capsys, output_root, tmp_path):
    config = tmp_path / "nccs.ini"
    config.write_text(
        "[experiment]\nkind = nccs\nname = nccs-cli\n\n"
        f"[run]\ntrials = 10\noutput_dir = {output_root}\n"
    )
    assert main(["run", str(config)]) == 0
    assert capsys.readouterr().out.startswith("ALL PASS")

    assert main(["report", str(output_root)]) == 0
    assert (output_root / "summary.txt").is_file()


def test_unknown_preset_exits_with_error():
    assert main(["run", "no-such-preset"]) == 2


def test_report_without_manifests(tmp_path):
    assert main(["report", str(tmp_path)]) == 1
