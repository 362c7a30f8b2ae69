"""Reference process models and matrices used by the demos and test suite."""
import numpy as np

from .process_model import Activity, ProcessModel

# mean durations in hours
SEQUENTIAL_MEANS = (86.0, 91.0, 163.0)
CONCURRENT_EXTRA_MEAN = 100.0

SEQUENTIAL_EMISSION = np.array([
    [0.10, 0.15, 0.65, 0.10],
    [0.05, 0.10, 0.50, 0.35],
    [0.15, 0.70, 0.05, 0.10],
])

# rows: {a1}, {a2}, {a3, a4}, {a3}, {a4}
CONCURRENT_EMISSION = np.array([
    [0.10, 0.15, 0.65, 0.10],
    [0.05, 0.10, 0.50, 0.35],
    [0.15, 0.70, 0.05, 0.10],
    [0.15, 0.70, 0.05, 0.10],
    [1.00, 0.00, 0.00, 0.00],
])

SEQUENTIAL_T20 = np.array([
    [0.793, 0.185, 0.021],
    [0.011, 0.804, 0.185],
    [0.103, 0.012, 0.885],
])

# reference factorization result for the sequential model (states x symbols)
SEQUENTIAL_E_TENSOR = np.array([
    [0.098, 0.149, 0.641, 0.113],
    [0.046, 0.095, 0.496, 0.363],
    [0.15, 0.7, 0.05, 0.099],
])

SEQUENTIAL_T_TENSOR = np.array([
    [0.809, 0.168, 0.023],
    [0.011, 0.787, 0.202],
    [0.093, 0.021, 0.886],
])

# six-state loan-process reference transitions over a quarter hour
BANKING_T_QUARTER = np.array([
    [0.578, 0.323, 0.084, 0.013, 0.001, 0.001],
    [0.001, 0.6, 0.314, 0.075, 0.004, 0.007],
    [0.004, 0.001, 0.629, 0.301, 0.024, 0.041],
    [0.029, 0.005, 0.001, 0.67, 0.111, 0.184],
    [0.103, 0.027, 0.004, 0.001, 0.865, 0.0],
    [0.172, 0.045, 0.008, 0.001, 0.0, 0.774],
])


def _activity(i, mean, name=None):
    return Activity(id=i, name=name or f"a{i}", d_min=0.0, d_max=10.0 * mean, d_avg=mean)


def sequential_model():
    """Three activities in a loop, exponential durations."""
    acts = [_activity(i + 1, m) for i, m in enumerate(SEQUENTIAL_MEANS)]
    model = ProcessModel(activities=acts, edges={(1, 2), (2, 3)}, periodic=True,
                         duration_mode="exponential")
    model.emission = SEQUENTIAL_EMISSION.tolist()
    return model


def concurrent_model():
    """The sequential loop with a fourth activity running beside the third."""
    means = SEQUENTIAL_MEANS + (CONCURRENT_EXTRA_MEAN,)
    acts = [_activity(i + 1, m) for i, m in enumerate(means)]
    model = ProcessModel(activities=acts, edges={(1, 2), (2, 3), (2, 4)}, periodic=True,
                         duration_mode="exponential")
    model.emission = CONCURRENT_EMISSION.tolist()
    return model


def banking_transitions():
    """Quarter-hour loan-process transitions with rows renormalized."""
    T = BANKING_T_QUARTER
    return T / T.sum(axis=1, keepdims=True)


def banking_emission(n_symbols=8, seed=6):
    """Synthetic emission matrix with one dominant symbol per state.

    Each row puts most of its mass on a symbol of its own and spreads the
    rest over the alphabet, so every row is distinct.
    """
    rng = np.random.default_rng(seed)
    n_states = BANKING_T_QUARTER.shape[0]
    E = rng.dirichlet(np.ones(n_symbols), size=n_states) * 0.4
    E[np.arange(n_states), np.arange(n_states)] += 0.6
    return E / E.sum(axis=1, keepdims=True)
