import logging

import torch
from flask import Flask
from flask.logging import default_handler

from config import Config


def create_app(config_object=Config):
    app = Flask(__name__)
    app.config.from_object(config_object)

    # Logging: library modules log under "lensflow.*"
    logger = logging.getLogger("lensflow")
    if default_handler not in logger.handlers:
        logger.addHandler(default_handler)
    logger.setLevel(app.config["LOG_LEVEL"])

    torch.set_num_threads(app.config["TORCH_THREADS"])

    # Blueprints
    from .runs.commands import runs_bp
    from .checks.commands import checks_bp

    app.register_blueprint(runs_bp)
    app.register_blueprint(checks_bp)

    return app
