pytest_plugins = ("cardio4d.testing",)
