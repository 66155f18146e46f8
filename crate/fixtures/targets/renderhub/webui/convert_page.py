from flask import Flask, request

from loaders.convert import convert_checkpoint

app = Flask(__name__)


@app.post("/convert")
def on_convert():
    model_path = request.form["model_path"]
    result = convert_checkpoint(model_path)
    return {"status": result}
