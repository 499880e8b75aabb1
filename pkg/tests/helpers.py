import numpy as np
from scipy.optimize import minimize


def linear_probe_accuracy(data, l2=1e-2) -> float:
    """Multinomial logistic regression on raw pixels (train split), accuracy on the test split."""
    x = data.x_train.reshape(len(data.x_train), -1)
    xt = data.x_test.reshape(len(data.x_test), -1)
    classes = int(max(data.y_train.max(), data.y_test.max())) + 1
    onehot = np.eye(classes)[data.y_train]
    d = x.shape[1]

    def objective(theta):
        w = theta[: d * classes].reshape(d, classes)
        b = theta[d * classes :]
        z = x @ w + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        loss = -np.mean(np.sum(onehot * np.log(p + 1e-300), axis=1)) + 0.5 * l2 * np.sum(w * w)
        g = (p - onehot) / len(x)
        return loss, np.concatenate([(x.T @ g + l2 * w).ravel(), g.sum(axis=0)])

    res = minimize(objective, np.zeros(d * classes + classes), jac=True, method="L-BFGS-B", options={"maxiter": 300})
    w = res.x[: d * classes].reshape(d, classes)
    b = res.x[d * classes :]
    return float(np.mean((xt @ w + b).argmax(axis=1) == data.y_test))
