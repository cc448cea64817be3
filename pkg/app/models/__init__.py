from .conditioning import ConditionVector, DynamicsConditioning
from .linear_probe import LinearDynamicsProbe
from .world_model import CDiTBackbone, DDTHead, NavWorldModel
