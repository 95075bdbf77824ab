"""mefcast: day-ahead grid CO2 emissions nowcasting.

Core modules:

* ``ingest``      hourly data acquisition, CSV codec, gap-filling validation
* ``series``      marginal emissions / generation / intensity derivations
* ``features``    windowing, calendar encoding, normalization, splits
* ``nn``          from-scratch multi-headed 1-D CNN with verified gradients
* ``train_eval``  training loop, metrics, baselines, sensitivity, nowcast
* ``synth``       merit-order dispatch scenarios with exact ground truth
* ``service``     FastAPI wrapper exposing the pipeline over HTTP
* ``cli``         thin client binding the service to files and exit codes
"""

__version__ = "0.1.0"
