from blinker import signal

em_iteration_finished = signal(
    "jm_scan.em_iteration_finished",
    doc="""
Emitted after every EM iteration.

Sender: the ``FitOptions`` of the running fit.
Keyword arguments: ``iteration`` (int), ``loglik`` (float), ``criterion`` (float),
``params`` (``Params`` after the M-step).
""",
)

replicate_finished = signal(
    "jm_scan.replicate_finished",
    doc="""
Emitted by the replicate study after each generate/fit cycle.

Sender: the ``ScenarioConfig`` of the study.
Keyword arguments: ``replicate`` (int), ``ok`` (bool), ``error`` (str or None).
""",
)
