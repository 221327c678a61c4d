"""Serve command for the model host."""

from __future__ import annotations

import click
import uvicorn

from .config import HostConfig
from .service import create_app


@click.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8080, show_default=True)
@click.option("--encoder", default="toy", show_default=True, help="Encoder checkpoint spec.")
@click.option("--generator", default="toy", show_default=True, help="Generator checkpoint spec.")
@click.option("--extractor", default="toy", show_default=True, help="Extractor spec.")
@click.option("--image-size", type=int, default=384, show_default=True, help="Scorer input side.")
@click.option("--device", default="cpu", show_default=True)
@click.option("--max-batch", type=int, default=64, show_default=True)
def main(host, port, encoder, generator, extractor, image_size, device, max_batch):
    """Serve the extraction, generation, and embedding endpoints."""
    config = HostConfig(
        host=host,
        port=port,
        encoder=encoder,
        generator=generator,
        extractor=extractor,
        image_size=image_size,
        device=device,
        max_batch=max_batch,
    )
    uvicorn.run(create_app(config), host=config.host, port=config.port, log_level="info")


if __name__ == "__main__":
    main()
