from .util import __version__
from .network import GsPcaNetModel, NetConfig, load_model, save_model
from .GsPcaNet_Wrapper import GsPcaNet
