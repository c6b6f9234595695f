import matplotlib.pyplot as plt
import numpy as np


def plot_learning_curves(frames, x='round'):
    """Plot test accuracy and loss of several runs.

    Parameters:
    --------------
    frames: dict
        label -> metrics DataFrame (see ``simulation.records_to_frame``).

    x: string
        Either 'round' or 'cumulative_seconds'.
    """
    plt.figure(dpi=100)
    for i, (label, frame) in enumerate(sorted(frames.items())):
        evaluated = frame.dropna(subset=['accuracy'])
        plt.subplot(211)
        plt.plot(evaluated[x], evaluated['accuracy'], label=label, color='C{}'.format(i))
        plt.subplot(212)
        plt.plot(evaluated[x], evaluated['loss'], label=label, color='C{}'.format(i))

    xlabel = 'rounds' if x == 'round' else 'simulated seconds'
    plt.subplot(211)
    plt.ylim([0, 1])
    plt.ylabel('acc')
    plt.xlabel(xlabel)
    plt.legend(loc=4)

    plt.subplot(212)
    plt.ylabel('loss')
    plt.xlabel(xlabel)
    plt.legend(loc=1)

    plt.tight_layout()
    return plt


def plot_gap(fits, bound=None):
    """Log-log loss gap curves of convex-lab runs.

    ``fits`` maps a label to a RateFit; ``bound`` is an optional bound series
    drawn dashed.
    """
    plt.figure(dpi=100)
    for i, (label, fit) in enumerate(sorted(fits.items())):
        t = np.arange(1, len(fit.gaps))
        plt.loglog(t + fit.lam, fit.gaps[1:], lw=1, color='C{}'.format(i),
                   label=r'{}: slope = {:1.3f}'.format(label, fit.slope))
    if bound is not None:
        t = np.arange(1, len(bound))
        lam = list(fits.values())[0].lam
        plt.loglog(t + lam, bound[1:], lw=1, linestyle='--', color='k', alpha=0.6,
                   label='bound')
    plt.xlabel(r't + $\lambda$')
    plt.ylabel(r'F(w$^t$) - F*')
    plt.legend()
    plt.tight_layout()
    return plt
