from arfm.base import *
from arfm.layers import *
from arfm.optim import *
from arfm.checkpoint import *
from arfm.tracks import *
from arfm.world import *
from arfm.pyramid import *
from arfm.dataset import *
from arfm.fusion import *
from arfm.flow import *
from arfm.model import *
from arfm.engine import *
from arfm.query import *
from arfm.track_encoder import *
from arfm.baselines import *
from arfm.evaluation import *
from arfm.training import *
from arfm.config import *
from arfm.workspace import *
