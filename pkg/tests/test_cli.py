import json

import numpy as np
import pytest

from tnsynth.cli import main
from tnsynth.fileio import read_tensor, write_tensor
from tnsynth.search import generate_synthetic, tt_blocks
from tnsynth.tensor import Tensor


@pytest.fixture
def synthetic(tmp_path):
    data = tmp_path / "d.tnsr"
    truth = tmp_path / "truth.json"
    code = main(["generate", "--dims", "16,18,20,22", "--rank-min", "2", "--rank-max", "5",
                 "--seed", "3", "--out", str(data), "--truth", str(truth)])
    assert code == 0
    return data, json.loads(truth.read_text())


def search(tmp_path, data, *extra, name="r"):
    report = tmp_path / f"{name}.json"
    net = tmp_path / f"{name}_net"
    code = main(["search", str(data), "--out", str(report), "--save-network", str(net), *extra])
    return code, (json.loads(report.read_text()) if report.exists() else None), net


def test_generate_reference_dims(synthetic, tmp_path):
    data, truth = synthetic
    t = read_tensor(data)
    assert t.size == 126720
    assert [ix.name for ix in t.indices] == ["I1", "I2", "I3", "I4"]
    assert all(2 <= e["rank"] <= 5 for e in truth["edges"])
    again = tmp_path / "again.tnsr"
    main(["generate", "--dims", "16,18,20,22", "--seed", "3", "--out", str(again)])
    assert again.read_bytes() == data.read_bytes()


@pytest.mark.parametrize("argv", [
    ["generate", "--dims", "4,4,4", "--rank-min", "5", "--rank-max", "2", "--out", "x"],
    ["generate", "--dims", "4,a", "--out", "x"],
])
def test_generate_bad_args(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2


def test_search_report_and_verify(synthetic, tmp_path, capsys):
    data, truth = synthetic
    code, report, net = search(tmp_path, data, "--eps", "1e-6")
    assert code == 0
    assert report["compression_ratio"] >= truth["compression_ratio"]
    assert report["achieved_rel_error"] <= 1e-6
    assert report["input_shape"] == [16, 18, 20, 22]
    assert report["sketch_count"] == 63
    assert report["config"]["rank_strategy"] == "constraint"
    for key in ("nodes", "edges", "program", "timings", "network_dir"):
        assert key in report
    assert sum(n["size"] for n in report["nodes"]) == report["network_size"]
    capsys.readouterr()
    assert main(["verify", str(data), str(tmp_path / "r.json")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert abs(out["achieved_rel_error"] - report["achieved_rel_error"]) <= 1e-10
    assert main(["verify", str(data), str(net)]) == 0


def test_edge_list_matches_saved_topology(synthetic, tmp_path):
    data, _ = synthetic
    _, report, net = search(tmp_path, data, "--eps", "0.01")
    text = (net / "topology.txt").read_text()
    for e in report["edges"]:
        line = f"rank {e['rank']} partition {{{','.join(e['partition'])}}}"
        assert line in text


def test_huge_eps_gives_small_ranks(synthetic, tmp_path):
    data, _ = synthetic
    code, report, _ = search(tmp_path, data, "--eps", "0.999")
    assert code == 0
    assert all(e["rank"] == 1 for e in report["edges"])
    assert main(["verify", str(data), str(tmp_path / "r.json")]) == 0


def test_threads_do_not_change_result(synthetic, tmp_path, monkeypatch):
    data, _ = synthetic
    _, one, _ = search(tmp_path, data, "--eps", "0.01", "--threads", "1", name="a")
    monkeypatch.setenv("TNSYNTH_THREADS", "3")
    _, many, _ = search(tmp_path, data, "--eps", "0.01", name="b")
    assert many["config"]["threads"] == 3
    assert one["edges"] == many["edges"] and one["program"] == many["program"]


def test_truncated_file_exit_2(synthetic, tmp_path, capsys):
    data, _ = synthetic
    bad = tmp_path / "bad.tnsr"
    bad.write_bytes(data.read_bytes()[:-5])
    assert main(["search", str(bad), "--eps", "0.1"]) == 2
    assert "payload" in capsys.readouterr().err


def test_bad_eps_exit_2(synthetic):
    data, _ = synthetic
    assert main(["search", str(data), "--eps", "1.5"]) == 2


def test_order_two_exit_3(tmp_path):
    path = tmp_path / "m.tnsr"
    main(["generate", "--dims", "5,6", "--out", str(path)])
    assert main(["search", str(path), "--eps", "0.1"]) == 3


def test_verify_detects_zeroed_factor(synthetic, tmp_path, capsys):
    data, _ = synthetic
    _, _, net = search(tmp_path, data, "--eps", "0.01")
    victim = sorted(net.glob("node_*.tnsr"))[0]
    t = read_tensor(victim)
    write_tensor(victim, Tensor(t.indices, np.zeros(t.shape)))
    capsys.readouterr()
    assert main(["verify", str(data), str(tmp_path / "r.json")]) == 1
    assert json.loads(capsys.readouterr().out)["achieved_rel_error"] == pytest.approx(1.0)


def test_verify_mismatched_names_exit_2(synthetic, tmp_path):
    data, _ = synthetic
    _, _, net = search(tmp_path, data, "--eps", "0.01")
    t = read_tensor(data)
    renamed = tmp_path / "renamed.tnsr"
    idx = [ix.__class__(ix.id, f"J{k}", ix.size) for k, ix in enumerate(t.indices)]
    write_tensor(renamed, Tensor(idx, t.data))
    assert main(["verify", str(renamed), str(net), "--eps", "0.01"]) == 2
    assert main(["verify", str(data), str(tmp_path / "missing")]) == 2


def test_baselines(tmp_path):
    blocks = tt_blocks(range(4))
    t, gt = generate_synthetic(4, [6, 7, 8, 9], (2, 4), seed=1, blocks=blocks, ranks=[2, 4, 3])
    data = tmp_path / "chain.tnsr"
    write_tensor(data, t)
    out = tmp_path / "tt.json"
    assert main(["baseline", str(data), "--method", "tt", "--eps", "1e-6", "--out", str(out)]) == 0
    assert json.loads(out.read_text())["compression_ratio"] == pytest.approx(t.size / gt.size())
    out = tmp_path / "ht.json"
    assert main(["baseline", str(data), "--method", "ht", "--eps", "0.1", "--out", str(out)]) == 0
    assert json.loads(out.read_text())["achieved_rel_error"] <= 0.1
    assert main(["baseline", str(data), "--method", "cp", "--eps", "0.1"]) == 2


def test_reuse(synthetic, tmp_path):
    data, _ = synthetic
    _, report, _ = search(tmp_path, data, "--eps", "1e-6")
    out = tmp_path / "reuse.json"
    assert main(["reuse", str(data), "--sketch-from", str(tmp_path / "r.json"),
                 "--eps", "1e-6", "--out", str(out)]) == 0
    again = json.loads(out.read_text())
    assert again["network_size"] == report["network_size"]
    assert again["edges"] == report["edges"]
    foreign = tmp_path / "foreign.json"
    foreign.write_text(json.dumps({"program": ["osplit {X9} rank=2"]}))
    assert main(["reuse", str(data), "--sketch-from", str(foreign), "--eps", "0.1"]) == 2


def test_run_program_example_topology(synthetic, tmp_path):
    data, _ = synthetic
    prog = tmp_path / "p.txt"
    prog.write_text("osplit {I1} rank=16\nosplit {I1,I2} rank=288\nosplit {I2} rank=18\n")
    out = tmp_path / "p.json"
    assert main(["run-program", str(data), str(prog), "--eps", "0.01", "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert sorted(tuple(e["partition"]) for e in report["edges"]) == [
        ("I1",), ("I1", "I2"), ("I2",)
    ]
    degrees = {}
    for e in report["edges"]:
        for n in e["nodes"]:
            degrees[n] = degrees.get(n, 0) + 1
    assert sorted(degrees.values()) == [1, 1, 1, 3]


def test_run_program_holes_are_completed(synthetic, tmp_path):
    data, _ = synthetic
    prog = tmp_path / "p.txt"
    prog.write_text("osplit {I3} rank=?\nosplit {I4} rank=?\n")
    out = tmp_path / "p.json"
    assert main(["run-program", str(data), str(prog), "--eps", "1e-6", "--out", str(out)]) == 0
    assert json.loads(out.read_text())["achieved_rel_error"] <= 1e-6


def test_run_program_invalid_combination(synthetic, tmp_path, capsys):
    data, _ = synthetic
    prog = tmp_path / "bad.txt"
    prog.write_text("osplit {I1,I2} rank=9\nosplit {I1,I3} rank=9\n")
    assert main(["run-program", str(data), str(prog), "--eps", "0.5"]) == 1
    assert "expression 1" in capsys.readouterr().err


def test_run_program_empty_is_identity(synthetic, tmp_path):
    data, _ = synthetic
    prog = tmp_path / "empty.txt"
    prog.write_text("")
    out = tmp_path / "e.json"
    assert main(["run-program", str(data), str(prog), "--eps", "0.1", "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["edges"] == [] and report["compression_ratio"] == 1.0
    assert report["achieved_rel_error"] == 0.0


def test_help_documents_exit_codes(capsys):
    assert main(["--help"]) == 0
    assert "exit codes" in capsys.readouterr().out


def test_missing_subcommand_is_input_error():
    assert main([]) == 2
