import numpy as np
import pytest

from swct.phantom import PhantomConfig, generate
from swct.volcore import save_case


@pytest.fixture(scope="session")
def default_phantom():
    """Default 128^3 x 25-frame phantom, generated once per session."""
    return generate(PhantomConfig(), seed=42)


@pytest.fixture(scope="session")
def default_case_dir(default_phantom, tmp_path_factory):
    seq, truth = default_phantom
    case_dir = tmp_path_factory.mktemp("default_case")
    save_case(seq, case_dir)
    import json
    (case_dir / "truth.json").write_text(json.dumps(truth.to_dict()) + "\n")
    return case_dir


@pytest.fixture(scope="session")
def small_phantom():
    """64^3 x 8-frame phantom for cheap IO-level tests."""
    cfg = PhantomConfig(dims=(64, 64, 64), n_frames=8)
    return generate(cfg, seed=7)


@pytest.fixture()
def unit_geom():
    """Empty 64^3 unit-spacing grid to hang masks on."""
    from swct.volcore import LabelMap

    return LabelMap((1.0, 1.0, 1.0), (0.0, 0.0, 0.0),
                    np.zeros((64, 64, 64), dtype=np.uint8))


def sphere_mask(shape, center, radius):
    grids = np.ogrid[tuple(slice(0, s) for s in shape)]
    d2 = sum((g - c) ** 2 for g, c in zip(grids, center))
    return d2 <= radius * radius
