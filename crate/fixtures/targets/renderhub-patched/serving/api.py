from fastapi import FastAPI

from training.loop import queue_length

app = FastAPI()


@app.get("/jobs")
def jobs():
    return {"queued": queue_length()}
