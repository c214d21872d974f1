import json

import numpy as np
import pytest

from motionfit.body_model import (
    CameraIntrinsics,
    Joint,
    MotionSequence,
    SkeletonModel,
    axis_angle_to_rot6d,
    default_hand_skeleton,
    forward_kinematics,
    load_motion,
    load_skeleton,
    project,
    rest_state,
    rot6d_to_matrix,
    save_motion,
    save_skeleton,
    IDENTITY_6D,
)
from motionfit.errors import BehindCamera, DegenerateRotation, ModelMismatch


class TestRot6d:
    def test_identity(self):
        assert np.allclose(rot6d_to_matrix([1, 0, 0, 0, 1, 0]), np.eye(3))

    def test_90deg_about_z(self):
        R = rot6d_to_matrix([0, 1, 0, -1, 0, 0])
        want = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1]], dtype=float)
        assert np.allclose(R, want)

    def test_scale_invariance(self):
        assert np.allclose(rot6d_to_matrix([2, 0, 0, 0, 3, 0]), np.eye(3))

    def test_degenerate_zero_first(self):
        with pytest.raises(DegenerateRotation):
            rot6d_to_matrix([0, 0, 0, 0, 1, 0])

    def test_degenerate_parallel(self):
        with pytest.raises(DegenerateRotation):
            rot6d_to_matrix([1, 0, 0, 2, 0, 0])

    def test_orthonormal_det_one(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            r = rng.normal(0, 1, 6)
            R = rot6d_to_matrix(r)
            assert np.allclose(R.T @ R, np.eye(3), atol=1e-10)
            assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-10)


def tiny_chain(shape_dim=2):
    """3-joint chain along +x with a simple shape basis."""
    joints = [
        Joint("root", None, np.zeros(3), np.zeros((shape_dim, 3))),
        Joint("a", 0, np.array([1.0, 0, 0]), np.array([[0.1, 0, 0], [0, 0, 0]])),
        Joint("b", 1, np.array([1.0, 0, 0]), np.array([[0.2, 0, 0], [0, 0.3, 0]])),
    ]
    return SkeletonModel(
        joints=joints,
        body_joint_count=3,
        hand_joint_indices=([], []),
        jaw_joint_index=None,
        subsets={},
        shape_dim=shape_dim,
        expr_dim=0,
    )


class TestForwardKinematics:
    def test_rest_pose_exact(self, model):
        st = rest_state(model)
        J = forward_kinematics(model, st)
        want = model.rest_positions() + st.trans
        assert np.allclose(J, want)

    def test_shape_accumulates_down_chain(self):
        m = tiny_chain()
        st = rest_state(m)
        st.shape = np.array([1.0, 0.0])
        J = forward_kinematics(m, st)
        # offsets grow by the per-joint basis column and accumulate
        assert np.allclose(J[1] - st.trans, [1.1, 0, 0])
        assert np.allclose(J[2] - st.trans, [2.3, 0, 0])

    def test_global_rotation_about_root(self, model):
        st = rest_state(model)
        st.theta_b = st.theta_b.copy()
        st.theta_b[0] = axis_angle_to_rot6d([0, 0, 1], np.pi / 2)
        J = forward_kinematics(model, st)
        J0 = forward_kinematics(model, rest_state(model))
        Rz = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1]], dtype=float)
        want = (J0 - J0[0]) @ Rz.T + J0[0]
        assert np.allclose(J, want, atol=1e-12)

    def test_rigid_equivariance_random(self, model):
        rng = np.random.default_rng(5)
        st = rest_state(model)
        st.theta_b = st.theta_b + rng.normal(0, 0.2, st.theta_b.shape)
        st.theta_h = st.theta_h + rng.normal(0, 0.2, st.theta_h.shape)
        J = forward_kinematics(model, st)
        r6 = rng.normal(0, 1, 6)
        R = rot6d_to_matrix(r6)
        st2 = rest_state(model)
        st2.theta_b = st.theta_b.copy()
        st2.theta_h = st.theta_h.copy()
        R0 = rot6d_to_matrix(st.theta_b[0])
        RR = R @ R0
        st2.theta_b[0] = np.concatenate([RR[:, 0], RR[:, 1]])
        J2 = forward_kinematics(model, st2)
        want = (J - J[0]) @ R.T + J[0]
        rel = np.abs(J2 - want).max() / max(np.abs(want).max(), 1.0)
        assert rel < 1e-10

    def test_linear_in_shape_at_rest(self, model):
        rng = np.random.default_rng(9)
        b1 = rng.normal(0, 1, model.shape_dim)
        b2 = rng.normal(0, 1, model.shape_dim)

        def joints(beta):
            st = rest_state(model)
            st.shape = beta
            return forward_kinematics(model, st)

        J0 = joints(np.zeros(model.shape_dim))
        lhs = joints(b1 + b2) - J0
        rhs = (joints(b1) - J0) + (joints(b2) - J0)
        assert np.abs(lhs - rhs).max() < 1e-10

    def test_dimension_mismatch(self, model):
        st = rest_state(model)
        st.theta_h = st.theta_h[:10]
        with pytest.raises(ModelMismatch):
            forward_kinematics(model, st)


class TestProject:
    cam = CameraIntrinsics(1000.0, 1000.0, 500.0, 500.0)

    def test_center(self):
        assert np.allclose(project([[0, 0, 1]], self.cam)[0], [500, 500])

    def test_offset(self):
        assert np.allclose(project([[0.5, 0, 1]], self.cam)[0], [1000, 500])

    def test_behind_camera(self):
        with pytest.raises(BehindCamera):
            project([[0, 0, 1e-9]], self.cam)

    def test_invalid_focal(self):
        with pytest.raises(Exception):
            CameraIntrinsics(0.0, 1.0, 0.0, 0.0)


class TestSerialization:
    def test_skeleton_roundtrip(self, model, tmp_path):
        path = tmp_path / "model.json"
        save_skeleton(model, path)
        again = load_skeleton(path)
        assert again.n_joints == model.n_joints
        assert again.names == model.names
        assert np.allclose(again.offsets, model.offsets)
        assert np.allclose(again.basis, model.basis)
        assert again.subsets == model.subsets
        assert again.pose_limits == model.pose_limits

    def test_motion_roundtrip(self, model, tmp_path):
        rng = np.random.default_rng(2)
        shape = rng.normal(0, 1, model.shape_dim)
        frames = []
        for _ in range(3):
            st = rest_state(model)
            st.theta_b = st.theta_b + rng.normal(0, 0.1, st.theta_b.shape)
            st.shape = shape
            frames.append(st)
        seq = MotionSequence(fps=30.0, frames=frames)
        path = tmp_path / "motion.json"
        save_motion(seq, path)
        again = load_motion(path)
        assert again.fps == seq.fps
        assert len(again) == len(seq)
        for a, b in zip(again.frames, seq.frames):
            assert np.array_equal(a.theta_b, b.theta_b)
            assert np.array_equal(a.theta_h, b.theta_h)
            assert np.array_equal(a.trans, b.trans)
        assert np.array_equal(again.shape, seq.shape)

    def test_shared_shape_enforced(self, model):
        st1 = rest_state(model)
        st2 = rest_state(model)
        with pytest.raises(ModelMismatch):
            MotionSequence(fps=25, frames=[st1, st2])


class TestModelInvariants:
    def make(self, **kw):
        joints = kw.pop("joints", [
            Joint("root", None, np.zeros(3), np.zeros((1, 3))),
            Joint("a", 0, np.ones(3), np.zeros((1, 3))),
        ])
        args = dict(
            joints=joints, body_joint_count=2, hand_joint_indices=([], []),
            jaw_joint_index=None, subsets={}, shape_dim=1, expr_dim=0,
        )
        args.update(kw)
        return SkeletonModel(**args)

    def test_parent_after_child_rejected(self):
        joints = [
            Joint("root", None, np.zeros(3), np.zeros((1, 3))),
            Joint("a", 1, np.ones(3), np.zeros((1, 3))),
        ]
        with pytest.raises(ModelMismatch):
            self.make(joints=joints)

    def test_two_roots_rejected(self):
        joints = [
            Joint("root", None, np.zeros(3), np.zeros((1, 3))),
            Joint("b", None, np.ones(3), np.zeros((1, 3))),
        ]
        with pytest.raises(ModelMismatch):
            self.make(joints=joints)

    def test_wrong_basis_rows_rejected(self):
        joints = [
            Joint("root", None, np.zeros(3), np.zeros((2, 3))),
            Joint("a", 0, np.ones(3), np.zeros((2, 3))),
        ]
        with pytest.raises(ModelMismatch):
            self.make(joints=joints)  # shape_dim=1 but basis has 2 rows

    def test_subset_out_of_range_rejected(self):
        with pytest.raises(ModelMismatch):
            self.make(subsets={"smooth_body": [5]})

    def test_default_model_subsets_valid(self, model):
        for key, idxs in model.subsets.items():
            assert all(0 <= i < model.n_joints for i in idxs), key


class TestHandSkeleton:
    def test_hand_variant_roundtrip(self, tmp_path):
        hand = default_hand_skeleton("left")
        st = rest_state(hand)
        assert st.theta_b is None and st.theta_f is None
        assert st.theta_h.shape == (16, 6)
        seq = MotionSequence(fps=25, frames=[st], handedness="left")
        path = tmp_path / "hand.json"
        save_motion(seq, path)
        again = load_motion(path)
        assert again.handedness == "left"
        assert again.frames[0].theta_b is None
        J = forward_kinematics(hand, again.frames[0])
        assert J.shape == (21, 3)

    def test_topological_invariant(self):
        hand = default_hand_skeleton("right")
        assert all(
            hand.parents[i] < i for i in range(1, hand.n_joints)
        )
