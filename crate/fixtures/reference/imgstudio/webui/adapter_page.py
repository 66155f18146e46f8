import gradio as gr

from adapters.registry import load_adapter


def on_load_adapter(adapter_path):
    # value comes straight from the textbox
    status = load_adapter(adapter_path)
    return f"loaded {status}"


def build_page():
    with gr.Blocks() as page:
        box = gr.Textbox(label="Adapter path")
        out = gr.Markdown()
        gr.Button("Load").click(on_load_adapter, inputs=box, outputs=out)
    return page
