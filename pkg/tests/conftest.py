import logging

from hypothesis import HealthCheck, settings

# the worst-case step bound is astronomically small, so nearly every run warns
logging.getLogger("agpush").setLevel(logging.ERROR)

settings.register_profile(
    "default",
    max_examples=60,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")
