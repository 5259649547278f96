from hypothesis import HealthCheck, settings

# property tests draw from a fixed seed so every run checks the same cases
settings.register_profile("repro", derandomize=True, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repro")
