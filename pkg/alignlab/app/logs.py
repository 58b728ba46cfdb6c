import logging
import logging.config
import os
from pathlib import Path
from typing import Union


def setup_logging(verbose: bool = False, log_file: Union[str, Path] = None):
    """
    setup logging for alignlab, warnings and errors from long sweeps also go to sentry when RAVEN_DSN is set

    With `log_file` every record is also appended to that file with a timestamp, numpy's RuntimeWarnings
    (overflow in a diverging run etc.) are routed through logging too.
    """
    log_level = 'DEBUG' if verbose else 'INFO'
    raven_dsn = os.getenv('RAVEN_DSN', None)
    if raven_dsn in ('', '-'):
        # "-" disables sentry
        raven_dsn = None
    handlers = {
        'alignlab': {'level': log_level, 'class': 'logging.StreamHandler', 'formatter': 'alignlab'},
        'sentry': {
            'level': 'WARNING',
            'class': 'raven.handlers.logging.SentryHandler',
            'dsn': raven_dsn,
            'release': os.getenv('COMMIT', None),
            'name': os.getenv('SERVER_NAME', '-'),
        },
    }
    names = ['alignlab', 'sentry']
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers['file'] = {
            'level': 'DEBUG',
            'class': 'logging.FileHandler',
            'filename': str(log_file),
            'formatter': 'timestamped',
        }
        names.append('file')
    logging.config.dictConfig(
        {
            'version': 1,
            'disable_existing_loggers': False,
            'formatters': {
                'alignlab': {'format': '%(levelname)s %(name)s %(message)s'},
                'timestamped': {'format': '%(asctime)s %(levelname)s %(name)s %(message)s'},
            },
            'handlers': handlers,
            'loggers': {
                'alignlab': {'handlers': names, 'level': 'DEBUG' if log_file else log_level},
                'py.warnings': {'handlers': [n for n in names if n != 'sentry'], 'level': 'WARNING'},
            },
        }
    )
    logging.captureWarnings(True)
