import numpy as np
import pytest

from procamsim.calibration import sweep_calibrate
from procamsim.geometry import Intrinsics, Pose
from procamsim.optics import EtlModel
from procamsim.scene import calibration_board, evaluation_board, hex_prism
from procamsim.vision import NoiseModel

STATIONS = [70.0, 90.0, 110.0, 130.0, 150.0, 170.0, 190.0, 210.0, 230.0, 250.0]
DEVICE_WH = (512, 512)


@pytest.fixture(scope="session")
def etl():
    return EtlModel()


@pytest.fixture(scope="session")
def base_intr():
    return Intrinsics(600.0, 600.0, 256.0, 256.0, k1=-0.05, k2=0.01)


@pytest.fixture(scope="session")
def eval_board():
    board = evaluation_board()
    board.faces()  # rasterize once for the whole session
    return board


@pytest.fixture(scope="session")
def calib_board():
    board = calibration_board()
    board.faces()
    return board


@pytest.fixture(scope="session")
def prism():
    target = hex_prism()
    target.faces()
    return target


@pytest.fixture(scope="session")
def clean_profile(calib_board, etl, base_intr):
    """Noiseless oracle-swept profile over the ten standard stations."""
    return sweep_calibrate(
        calib_board, etl, base_intr, DEVICE_WH, STATIONS,
        detector="oracle", noise=NoiseModel(0.0, 0.0), seed=7,
    )


def frontal_pose(z_mm: float) -> Pose:
    return Pose(np.eye(3), np.array([0.0, 0.0, z_mm]))
