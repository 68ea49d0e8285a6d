"""CSI fingerprint positioning with an attention-augmented residual CNN, and
trajectory tracking with a learned denoiser prior fused with IMU steps by
plug-and-play ADMM.  Everything runs on numpy, including the autodiff engine.
"""
from .channel_sim import ChannelConfig, CsiDataset, Environment, build_environment, csi_at, sample_dataset
from .denoiser import DenoiserBank, DenoiserModel, denoise, select_denoiser, train_bank, train_denoiser
from .positioning import NetworkConfig, PositionModel, flops_estimate, net_forward, train_position_net
from .tracking import PnpConfig, l_update, pnp_track, refine_trajectory
from .trajectory import Trajectory, ImuMeasurement, add_noise, gen_trajectory, imu_measure, make_dataset

__version__ = "0.1.0"
