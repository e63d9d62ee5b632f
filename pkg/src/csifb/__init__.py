"""Deep-learning CSI feedback for FDD massive MIMO with CsiNet and CsiNet-LSTM."""
from .channel import Dataset, ScenarioConfig, coherence_time, generate_dataset
from .models import CsiNetLstmParams, CsiNetParams, csinet_lstm_forward, forward_batch
from .training import TrainConfig, train_csinet, train_csinet_lstm

__version__ = "0.1.0"
