import hypothesis

hypothesis.settings.register_profile("mpsim", deadline=None, derandomize=True)
hypothesis.settings.load_profile("mpsim")
