import numpy as np
import pytest

from src.commands import (
    CommandType,
    flag_overrides,
    parse_command,
    parse_matrix,
    parse_vector,
    read_sample_csv,
)
from src.errors import InputError, InvalidSampleError


def test_parse_command_basic():
    cmd = parse_command(["classify", "--theta", "-1,-1", "--big-theta", "0,0,0,0"])
    assert cmd.type == CommandType.CLASSIFY
    assert cmd.args.theta == "-1,-1"
    assert cmd.args.rank_tol == 1e-9


def test_parse_command_common_flags_before_or_after():
    before = parse_command(["--seed", "3", "sample", "--mu", "1", "--sigma", "1", "--n", "5"])
    after = parse_command(["sample", "--mu", "1", "--sigma", "1", "--n", "5", "--seed", "3"])
    assert before.args.seed == 3
    assert after.args.seed == 3


def test_parse_command_steepness_demo():
    cmd = parse_command(["steepness-demo", "--theta", "-1,-1"])
    assert cmd.type == CommandType.STEEPNESS_DEMO
    assert cmd.args.epsilons is None


def test_parse_command_bad_flag_raises_input_error():
    with pytest.raises(InputError):
        parse_command(["fit"])
    with pytest.raises(InputError):
        parse_command(["sample", "--mu", "1", "--sigma", "1", "--n", "five"])
    with pytest.raises(InputError):
        parse_command(["unknown"])


def test_flag_overrides_only_set_flags():
    cmd = parse_command(["fit", "--input", "x.csv", "--tol", "1e-7", "--header"])
    assert flag_overrides(cmd.args) == {"tol": 1e-7, "header": True}


def test_parse_vector_and_matrix():
    assert parse_vector("1, -2.5,3e-1", "mu").tolist() == [1.0, -2.5, 0.3]
    matrix = parse_matrix("1,0.5,0.5,2", None, "sigma")
    assert matrix.tolist() == [[1.0, 0.5], [0.5, 2.0]]


def test_parse_matrix_rejects_asymmetry_and_size():
    with pytest.raises(InputError, match="not symmetric"):
        parse_matrix("1,0.5,0.4,2", None, "sigma")
    with pytest.raises(InputError):
        parse_matrix("1,0,0", 2, "sigma")
    with pytest.raises(InputError):
        parse_vector("1,,2", "mu")


def test_read_sample_csv_with_header(tmp_path):
    path = tmp_path / "data.csv"
    path.write_text("x1,x2\n1.5,2\n0.25,3\n\n", encoding="utf-8")
    sample = read_sample_csv(str(path), header=True)
    assert np.array_equal(sample.data, [[1.5, 2.0], [0.25, 3.0]])


def test_read_sample_csv_reports_bad_cells(tmp_path):
    path = tmp_path / "data.csv"
    path.write_text("1,2\n3,abc\n", encoding="utf-8")
    with pytest.raises(InvalidSampleError) as info:
        read_sample_csv(str(path), header=False)
    assert (info.value.row, info.value.column) == (2, 2)

    path.write_text("1,2\n3\n", encoding="utf-8")
    with pytest.raises(InvalidSampleError, match="row 2: expected 2 columns"):
        read_sample_csv(str(path), header=False)

    path.write_text("x1\n", encoding="utf-8")
    with pytest.raises(InvalidSampleError, match="no rows"):
        read_sample_csv(str(path), header=True)
