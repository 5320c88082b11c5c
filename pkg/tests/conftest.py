import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rrdbjpeg.imaging import ColorSpace, Image, save_image

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def _natural():
    import skimage.data as sd

    return {
        "astronaut": sd.astronaut(),
        "coffee": sd.coffee(),
        "chelsea": sd.chelsea(),
        "rocket": sd.rocket(),
    }


@pytest.fixture(scope="session")
def natural_images():
    """Crops of standard test photographs as RGB Images."""
    return {k: Image(v[:160, :192].astype(np.float64), ColorSpace.RGB) for k, v in _natural().items()}


@pytest.fixture(scope="session")
def natural_arrays():
    return _natural()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def image_dir(tmp_path, natural_images):
    d = tmp_path / "clean"
    d.mkdir()
    for name, img in natural_images.items():
        save_image(img.crop(0, 0, 128, 128), d / f"{name}.png")
    return d


# one verdict line per acceptance criterion, printed after the run
_VERDICTS: dict[int, str] = {}


def pytest_runtest_logreport(report):
    mark = dict(report.user_properties).get("criterion")
    if mark is None or (report.when != "call" and not report.failed):
        return
    number, title = mark
    detail = dict(report.user_properties).get("detail", "")
    status = "PASS" if report.passed else "FAIL"
    _VERDICTS[number] = f"criterion {number} {status}: {title}" + (f" ({detail})" if detail else "")


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[n])
