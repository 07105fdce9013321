"""pscsim: deterministic simulator of a digital magnet power-supply control
stack, from the 50 kHz current regulation loop and its register-map link
protocol up through channels, magnet families, optic knobs and the 1 kHz
orbit-feedback path."""

from .channels import ChannelError, ChannelServer
from .controller import ControllerConfig, FleetEngine, PscController, quantize_ef
from .link import Frame, Link, crc8, decode_frame, encode_frame
from .machine import MachineLayer, OpticModel, toy_machine_config
from .orbit import OrbitFeedback, compute_pinv
from .plant import AdcModel, DEFAULT_CLASSES, PlantParams, PlantState, plant_step
from .scenario import Machine, ScenarioError, build_machine, load_scenario
from .sim import Simulator

__version__ = "0.1.0"
