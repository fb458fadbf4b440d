# Two subjects, two biomarkers with (intercept, time) fixed terms and a random intercept, two causes.
SPEC = {
    "causes": 2,
    "survival": ["w"],
    "biomarkers": [
        {"name": "y1", "fixed": ["intercept", "time"], "random": ["intercept"]},
        {"name": "y2", "fixed": ["intercept", "time"], "random": ["intercept"]},
    ],
}

LONG = [
    {"subject": "1", "biomarker": 1, "time": 0.0, "value": 1.0},
    {"subject": "1", "biomarker": 1, "time": 1.0, "value": 2.0},
    {"subject": "1", "biomarker": 2, "time": 0.5, "value": 3.0},
    {"subject": "2", "biomarker": 1, "time": 0.0, "value": 1.5},
    {"subject": "2", "biomarker": 2, "time": 0.0, "value": 2.5},
    {"subject": "2", "biomarker": 2, "time": 1.5, "value": 2.0},
]

SURV = [
    {"subject": "1", "time": 2.0, "cause": 1, "w": 0.5},
    {"subject": "2", "time": 3.0, "cause": 0, "w": -1.0},
]

SPEC_TOML = """causes = 2
survival = ["w"]

[[biomarkers]]
name = "y1"
fixed = ["intercept", "time"]
random = ["intercept"]

[[biomarkers]]
name = "y2"
fixed = ["intercept", "time"]
random = ["intercept"]
"""
