"""External utilities module.

Some of the function is this module are imported from adenine:
https://github.com/slipguru/adenine/blob/master/adenine/utils/extra.py
"""
import logging
import time

logger = logging.getLogger(__name__)


def sec_to_time(seconds):
    """Transform seconds into a formatted time string.

    Parameters:
    --------------
    seconds: int or float
        Seconds to be transformed, either wall-clock or simulated.

    Returns:
    --------------
    time: string
        A well formatted time string (hh:mm:ss).
    """
    m, s = divmod(int(round(seconds)), 60)
    h, m = divmod(m, 60)
    return "%02d:%02d:%02d" % (h, m, s)


def timed(function):
    """Decorator that logs the wall time of the decorated function."""
    def timed_function(*args, **kwargs):
        t0 = time.time()
        result = function(*args, **kwargs)
        logger.info("[%s] - Elapsed time : %s", function.__name__,
                    sec_to_time(time.time() - t0))
        return result
    timed_function.__name__ = function.__name__
    timed_function.__doc__ = function.__doc__
    return timed_function
