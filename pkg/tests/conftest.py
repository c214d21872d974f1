import numpy as np
import pytest

from motionfit import default_limits, default_skeleton, rest_state
from motionfit.body_model import CameraIntrinsics, MotionSequence


@pytest.fixture(scope="session")
def model():
    return default_skeleton()


@pytest.fixture(scope="session")
def camera():
    return CameraIntrinsics(fx=1000.0, fy=1000.0, cx=500.0, cy=500.0)


@pytest.fixture(scope="session")
def limits(model):
    return default_limits(model)


def random_sequence(model, T=3, seed=0, pose_noise=0.15, trans_noise=0.05, shape_noise=0.1,
                    fps=25.0):
    """Random smooth-free sequence near the rest pose for gradient checks."""
    rng = np.random.default_rng(seed)
    shape = rng.normal(0.0, shape_noise, model.shape_dim)
    frames = []
    base = rest_state(model)
    for _ in range(T):
        st = rest_state(model)
        st.shape = shape
        if st.theta_b is not None:
            st.theta_b = st.theta_b + rng.normal(0.0, pose_noise, st.theta_b.shape)
        st.theta_h = st.theta_h + rng.normal(0.0, pose_noise, st.theta_h.shape)
        if st.theta_f is not None:
            st.theta_f = st.theta_f + rng.normal(0.0, pose_noise, 6)
        st.trans = base.trans + rng.normal(0.0, trans_noise, 3)
        frames.append(st)
    for f in frames:
        f.shape = shape
    return MotionSequence(fps=fps, frames=frames)
