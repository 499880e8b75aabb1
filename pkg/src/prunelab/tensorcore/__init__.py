from .engine import Gradients, NetTape, accuracy, backward, forward, logits, loss_and_grad, mean_loss, predict
from .gradcheck import GradCheckReport, grad_check
from .optim import OptimizerState, sgd_step, sgd_train
from .serialize import load_weights, save_weights
from .tape import NonFiniteError, ShapeError, Tape, TapeConsumedError, Var
