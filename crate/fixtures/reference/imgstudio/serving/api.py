from fastapi import FastAPI

from utils.helpers import clamp

app = FastAPI()


@app.post("/generate")
def generate(prompt: str, steps: int = 20):
    return {"prompt": prompt, "steps": clamp(steps, 1, 100)}
