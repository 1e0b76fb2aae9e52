"""Virtual spunbond laboratory: fiber laydown simulation, DoE and blocked-network analysis."""

from .airflow import DomainGeometry, ProcessParams, TurbulenceConfig, build_field
from .bnn import BnnModel, BnnSpec, Dataset, average_elasticity, forward, input_gradient, train
from .doe import build_plan, latin_hypercube, run_plan
from .errors import EmptyResultError, InsufficientDataError, StepError, ValidationError
from .fiber import MaterialInput, SimulationConfig, derive_material, simulate
from .laydown import LaydownSample, LaydownStats, TailPolicy, characterize, generate_virtual_web

__version__ = "0.1.0"
