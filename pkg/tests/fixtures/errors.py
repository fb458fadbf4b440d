# Single defects applied to the toy tables, with the error each one must raise.
SURV_UNKNOWN_CAUSE = {"subject": "2", "time": 3.0, "cause": 3, "w": -1.0}
SURV_DUPLICATE = {"subject": "1", "time": 2.5, "cause": 0, "w": 0.5}
LONG_AFTER_EVENT = {"subject": "1", "biomarker": 1, "time": 5.0, "value": 2.2}
LONG_NON_NUMERIC = {"subject": "1", "biomarker": 1, "time": "soon", "value": 2.2}
LONG_UNKNOWN_SUBJECT = {"subject": "3", "biomarker": 1, "time": 0.0, "value": 2.2}
LONG_UNKNOWN_BIOMARKER = {"subject": "1", "biomarker": 4, "time": 0.0, "value": 2.2}
