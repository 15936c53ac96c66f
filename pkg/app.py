# app.py
# -------------------------------------------------------
# Punto de entrada del laboratorio de segmentación
#   python app.py synth --count 128 --size 64 --seed 7
#   python app.py train --loss adaptive_focal --epochs 10
#   python app.py eval --run runs/adaptive_focal_seed0
#   python app.py compare --epochs 10
# -------------------------------------------------------
from modules.cli import app

if __name__ == "__main__":
    app(prog_name="capsule")
