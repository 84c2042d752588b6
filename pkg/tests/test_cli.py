"""CLI commands: exit codes, file outputs, determinism, flag parsing."""

import os
import stat

import pytest

from pqfl import bench, channel, sig
from pqfl.cli import main, parse_attack
from pqfl.sig import SchemeId


def run_cli(*argv) -> int:
    return main(list(argv))


# --- keygen ---------------------------------------------------------------------

def test_keygen_writes_expected_files(tmp_path):
    out = tmp_path / "keys"
    code = run_cli("keygen", "--scheme", "dilithium", "--clients", "10",
                   "--out-dir", str(out), "--seed", "1")
    assert code == 0
    key_files = sorted(p.name for p in out.iterdir())
    assert len(key_files) == 23  # 11 participants x 2 + manifest
    assert "manifest.txt" in key_files
    meta = sig.metadata(SchemeId.DILITHIUM)
    assert (out / "server.pk").stat().st_size == meta.public_key_len
    assert (out / "server.sk").stat().st_size == meta.secret_key_len
    assert (out / "client_003.pk").stat().st_size == meta.public_key_len
    manifest = (out / "manifest.txt").read_text().splitlines()
    assert len(manifest) == 11
    assert "scheme=dilithium" in manifest[0]


def test_keygen_secret_files_restrictive_permissions(tmp_path):
    out = tmp_path / "keys"
    assert run_cli("keygen", "--scheme", "testscheme", "--clients", "1",
                   "--out-dir", str(out), "--seed", "2") == 0
    mode = stat.S_IMODE(os.stat(out / "server.sk").st_mode)
    assert mode == 0o600


def test_keygen_deterministic_with_seed(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        run_cli("keygen", "--scheme", "dilithium", "--clients", "2",
                "--out-dir", str(d), "--seed", "5")
    assert (a / "client_001.pk").read_bytes() == (b / "client_001.pk").read_bytes()


# --- run -------------------------------------------------------------------------

def run_args(tmp_path, *extra, csv_name="m.csv"):
    return (
        "run", "--scheme", "testscheme", "--clients", "4", "--rounds", "3",
        "--samples", "200", "--features", "8", "--classes", "3",
        "--seed", "42", "--out", str(tmp_path / csv_name), *extra,
    )


def test_run_writes_csv_and_exits_zero(tmp_path, capsys):
    assert run_cli(*run_args(tmp_path)) == 0
    records = bench.read_round_csv(tmp_path / "m.csv")
    assert len(records) == 3
    assert [r.round for r in records] == [0, 1, 2]
    assert all(r.verified_count == 4 for r in records)
    out = capsys.readouterr().out
    assert "final loss" in out


def test_run_deterministic(tmp_path):
    run_cli(*run_args(tmp_path, csv_name="a.csv"))
    run_cli(*run_args(tmp_path, csv_name="b.csv"))
    a = bench.read_round_csv(tmp_path / "a.csv")
    b = bench.read_round_csv(tmp_path / "b.csv")
    for ra, rb in zip(a, b):
        assert ra.global_loss == rb.global_loss
        assert ra.payload_bytes == rb.payload_bytes
        assert ra.signature_bytes == rb.signature_bytes
        assert ra.verified_count == rb.verified_count


def test_run_requires_seed(tmp_path, capsys):
    code = run_cli("run", "--scheme", "testscheme", "--out", str(tmp_path / "x.csv"))
    assert code == 2
    assert "seed" in capsys.readouterr().err


def test_unknown_flag_fails_fast():
    with pytest.raises(SystemExit) as exc:
        run_cli("run", "--scheme", "testscheme", "--seed", "1", "--frobnicate")
    assert exc.value.code == 2


def test_run_with_attack_rejects_target_every_round(tmp_path):
    assert run_cli(*run_args(tmp_path, "--attack", "bitflip:target=1:p=1.0")) == 0
    records = bench.read_round_csv(tmp_path / "m.csv")
    assert all(r.rejected_count == 1 for r in records)
    assert all(r.verified_count == 3 for r in records)


def test_run_bad_attack_spec(tmp_path, capsys):
    assert run_cli(*run_args(tmp_path, "--attack", "meteor:p=1.0")) == 2
    assert "attack" in capsys.readouterr().err


def test_run_over_tcp(tmp_path):
    assert run_cli(*run_args(tmp_path, "--transport", "tcp")) == 0
    records = bench.read_round_csv(tmp_path / "m.csv")
    assert len(records) == 3 and all(r.verified_count == 4 for r in records)


def test_run_strict_rejects_test_scheme(tmp_path, capsys):
    assert run_cli(*run_args(tmp_path, "--strict")) == 1
    assert "strict" in capsys.readouterr().err


def test_run_scheme_all_covers_every_scheme(tmp_path):
    args = (
        "run", "--scheme", "all", "--clients", "2", "--rounds", "1",
        "--samples", "60", "--features", "6", "--classes", "2",
        "--seed", "3", "--out", str(tmp_path / "all.csv"),
    )
    assert run_cli(*args) == 0
    records = bench.read_round_csv(tmp_path / "all.csv")
    assert {r.scheme for r in records} == {"dilithium", "falcon", "sphincsplus", "testscheme"}


def test_config_file_and_flag_override(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text(
        "scheme = testscheme\n"
        "clients = 4\n"
        "rounds = 5\n"
        "samples = 200\n"
        "features = 8\n"
        "classes = 3\n"
        "seed = 42\n"
        f"out = {tmp_path / 'cfg.csv'}\n"
    )
    assert run_cli("run", "--config", str(cfg_file)) == 0
    assert len(bench.read_round_csv(tmp_path / "cfg.csv")) == 5

    # explicit flag beats the file
    assert run_cli("run", "--config", str(cfg_file), "--rounds", "2",
                   "--out", str(tmp_path / "cfg2.csv")) == 0
    assert len(bench.read_round_csv(tmp_path / "cfg2.csv")) == 2


def test_config_file_unknown_key(tmp_path, capsys):
    cfg_file = tmp_path / "bad.cfg"
    cfg_file.write_text("seed = 1\nwarp_factor = 9\n")
    assert run_cli("run", "--config", str(cfg_file)) == 2
    assert "warp_factor" in capsys.readouterr().err


def test_run_idx_requires_existing_paths(tmp_path, capsys):
    code = run_cli("run", "--dataset", "idx", "--idx-images", str(tmp_path / "nope.idx"),
                   "--idx-labels", str(tmp_path / "nope2.idx"), "--seed", "1")
    assert code == 2


# --- bench / report -----------------------------------------------------------------

def test_bench_counts_and_csv(tmp_path, capsys):
    out = tmp_path / "micro.csv"
    code = run_cli("bench", "--schemes", "testscheme", "--sizes", "256,1024",
                   "--iters", "30", "--out", str(out))
    assert code == 0
    records = bench.read_microbench_csv(out)
    assert len(records) == 6
    assert "testscheme" in capsys.readouterr().out


def test_report_on_no_attack_run(tmp_path, capsys):
    run_cli(*run_args(tmp_path))
    capsys.readouterr()
    assert run_cli("report", str(tmp_path / "m.csv")) == 0
    out = capsys.readouterr().out
    assert "verified=12" in out  # 4 clients x 3 rounds, all verified
    assert "rejected=0" in out


def test_report_missing_file(tmp_path, capsys):
    assert run_cli("report", str(tmp_path / "missing.csv")) == 2


# --- attack spec parser ---------------------------------------------------------------

def test_parse_attack_specs():
    cfg = parse_attack("bitflip:target=1:p=0.5")
    assert cfg.kind == channel.AttackKind.BITFLIP
    assert cfg.target_client == 1 and cfg.probability == 0.5

    cfg = parse_attack("substitute:target=all:p=1.0:poison=zero:direction=c2s:seed=4")
    assert cfg.kind == channel.AttackKind.SUBSTITUTE
    assert cfg.target_client is None and cfg.poison == "zero"
    assert cfg.direction == channel.Direction.CLIENT_TO_SERVER and cfg.seed == 4

    assert parse_attack("substitute:target=2").poison == "negate"  # default poison

    with pytest.raises(ValueError):
        parse_attack("bitflip:warp=9")
    with pytest.raises(ValueError):
        parse_attack("nothing:p=1")
