/** Browser bootstrap: connect, build panels, run the preview poll loop. */

import { ServiceClient } from "./api.js";
import { ViewerController } from "./controller.js";
import {
  buildLightPanel,
  buildMaterialPanel,
  buildTransformPanel,
  paintFrame,
} from "./panels.js";
import { base64ToBytes, decodePfm, decodePpm, tonemapFloat } from "./ppm.js";

const params = new URLSearchParams(location.search);
const serviceUrl = params.get("service") ?? "http://127.0.0.1:8790";

const statusLine = document.getElementById("status") as HTMLElement;
const retryButton = document.getElementById("retry") as HTMLButtonElement;
const canvas = document.getElementById("frame") as HTMLCanvasElement;
const grid = document.getElementById("decomposition") as HTMLElement;
const decomposeToggle = document.getElementById("decompose") as HTMLInputElement;
const convergeButton = document.getElementById("converge") as HTMLButtonElement;

const controller = new ViewerController(new ServiceClient(serviceUrl));

let orbit = { azimuthDeg: 0, elevationDeg: 15, radius: 2.5, target: [0, 0.3, 0] };
let dragging = false;
let lastX = 0;
let lastY = 0;

canvas.addEventListener("pointerdown", (e) => {
  dragging = true;
  lastX = e.clientX;
  lastY = e.clientY;
});
window.addEventListener("pointerup", () => (dragging = false));
window.addEventListener("pointermove", (e) => {
  if (!dragging) return;
  orbit = {
    ...orbit,
    azimuthDeg: orbit.azimuthDeg + (e.clientX - lastX) * 0.5,
    elevationDeg: Math.max(-80, Math.min(80, orbit.elevationDeg + (e.clientY - lastY) * 0.5)),
  };
  lastX = e.clientX;
  lastY = e.clientY;
  void controller.orbitCamera(orbit);
});

retryButton.addEventListener("click", () => void boot());

convergeButton.addEventListener("click", () => {
  void (async () => {
    await controller.stopLoop();
    const frame = await controller.requestConverged();
    paintFrame(canvas, decodePpm(frame.ppm));
    statusLine.textContent = `converged frame ${frame.index}`;
    startPreviewLoop();
  })();
});

decomposeToggle.addEventListener("change", () => {
  void (async () => {
    if (decomposeToggle.checked) {
      await controller.stopLoop();
      const result = await controller.fetchDecomposition();
      grid.replaceChildren();
      for (const name of ["emission", "direct", "indirect", "glossy"]) {
        const cell = document.createElement("figure");
        const c = document.createElement("canvas");
        paintFrame(c, tonemapFloat(decodePfm(base64ToBytes(result.layers[name]))));
        const caption = document.createElement("figcaption");
        caption.textContent = name;
        cell.append(c, caption);
        grid.append(cell);
      }
      grid.hidden = false;
      canvas.hidden = true;
    } else {
      grid.hidden = true;
      canvas.hidden = false;
      startPreviewLoop();
    }
  })();
});

function startPreviewLoop(): void {
  controller.startLoop((frame) => {
    if (!decomposeToggle.checked) {
      paintFrame(canvas, decodePpm(frame.ppm));
      statusLine.textContent = `frame ${frame.index}`;
    }
  });
}

async function boot(): Promise<void> {
  statusLine.textContent = `connecting to ${serviceUrl} ...`;
  retryButton.hidden = true;
  const ok = await controller.connect();
  if (!ok) {
    statusLine.textContent = `connection failed: ${controller.lastError}`;
    retryButton.hidden = false;
    return;
  }
  buildLightPanel(controller, document.getElementById("lights") as HTMLElement);
  buildMaterialPanel(controller, document.getElementById("materials") as HTMLElement);
  buildTransformPanel(controller, document.getElementById("objects") as HTMLElement);
  statusLine.textContent = "connected";
  startPreviewLoop();
}

void boot();
