from setuptools import setup

setup(
    name = "pda_lab",
    version = "1.0",
    description = "Progressive data augmentation and robustness evaluation at desk scale",
    packages = ["pda_lab", "pda_lab.analysis", "pda_lab.data"],
    long_description = "",
    install_requires = ["numpy", "scipy", "Pillow", "sipyco"],
    extras_require = {"test": ["pytest", "hypothesis"]},
    entry_points = {
        "console_scripts": [
            "pda_lab = pda_lab.cli:main",
            "pda_train = pda_lab.cli:train_main",
            "pda_attack_eval = pda_lab.cli:attack_eval_main",
            "pda_corrupt = pda_lab.cli:corrupt_main",
            "pda_fourier = pda_lab.cli:fourier_main",
            "pda_theory_check = pda_lab.cli:theory_check_main"
        ]
    }
)
