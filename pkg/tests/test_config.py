import pytest

from fedmobfair.config import ConfigError, grid_from, parse_kv, ssim_from


def test_parse_values_and_blocks():
    kv = parse_kv("a = 1  # note\nb.c = x\n\n[g]\nk = 2\n[g]\nk = 3\n")
    assert kv.get_int("a") == 1 and kv.get_str("b.c") == "x"
    assert [b.get_int("k") for _, b in kv.blocks] == [2, 3]
    assert kv.get_floats("missing", [0.5]) == [0.5]


def test_errors_name_key_paths():
    kv = parse_kv("lr = fast\n[group]\ncount = x\n")
    with pytest.raises(ConfigError, match="^lr: expected number"):
        kv.get_float("lr")
    with pytest.raises(ConfigError, match=r"group\[0\]\.count"):
        kv.blocks[0][1].get_int("count")
    with pytest.raises(ConfigError, match="rounds: missing"):
        kv.get_int("rounds")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_kv("a = 1\na = 2\n")
    with pytest.raises(ConfigError, match="key = value"):
        parse_kv("just words\n")


def test_grid_and_ssim_from():
    kv = parse_kv("grid.origin_lat = 1\ngrid.origin_lon = 2\ngrid.w = 1\ngrid.l = 2\ngrid.cell_size = 0.5\n"
                  "ssim.window = 4\n")
    g = grid_from(kv)
    assert g.shape == (4, 2)
    assert grid_from(kv, 0.25).shape == (8, 4)
    assert ssim_from(kv).window == 4 and ssim_from(kv).k1 == 0.01
    with pytest.raises(ConfigError, match="grid"):
        grid_from(kv, 3.0)
    with pytest.raises(ConfigError, match="ssim"):
        ssim_from(parse_kv("ssim.window = 0\n"))
