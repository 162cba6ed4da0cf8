/**
 * DOM editing panels bound to the controller.
 *
 * Panels are regenerated from the scene document on connect; every widget
 * routes through the controller's coalesced edit queue, so dragging a slider
 * keeps at most one PATCH in flight for that entity.
 */

import { LightEntry, MaterialEntry } from "./api.js";
import { ViewerController } from "./controller.js";

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  cls?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (cls) node.className = cls;
  if (text) node.textContent = text;
  return node;
}

function slider(
  label: string,
  value: number,
  min: number,
  max: number,
  step: number,
  onInput: (v: number) => void,
): HTMLElement {
  const row = el("label", "row");
  row.append(el("span", "name", label));
  const input = el("input");
  input.type = "range";
  input.min = String(min);
  input.max = String(max);
  input.step = String(step);
  input.value = String(value);
  const readout = el("span", "value", value.toFixed(2));
  input.addEventListener("input", () => {
    const v = Number(input.value);
    readout.textContent = v.toFixed(2);
    onInput(v);
  });
  row.append(input, readout);
  return row;
}

function scaleRgb(rgb: number[], factor: number): number[] {
  return rgb.map((c) => c * factor);
}

export function buildLightPanel(
  controller: ViewerController,
  container: HTMLElement,
): void {
  container.replaceChildren();
  const scene = controller.scene;
  if (!scene) return;
  for (const [id, light] of Object.entries(scene.lights)) {
    const box = el("fieldset", "entity");
    box.append(el("legend", "", `${id} (${light.type})`));
    const base = (light.radiance ?? light.color ?? [1, 1, 1]).slice();
    const field = light.radiance ? "radiance" : "color";
    box.append(
      slider("intensity", 1.0, 0.0, 2.0, 0.01, (v) => {
        void controller.editLight(id, { [field]: scaleRgb(base, v) });
      }),
    );
    container.append(box);
  }
}

export function buildMaterialPanel(
  controller: ViewerController,
  container: HTMLElement,
): void {
  container.replaceChildren();
  const scene = controller.scene;
  if (!scene) return;
  for (const [id, mat] of Object.entries(scene.materials)) {
    const box = el("fieldset", "entity");
    box.append(el("legend", "", id));
    box.append(
      slider("roughness", mat.roughness ?? 0.8, 0.0, 1.0, 0.01, (v) => {
        void controller.editMaterial(id, { roughness: v });
      }),
    );
    container.append(box);
  }
}

export function buildTransformPanel(
  controller: ViewerController,
  container: HTMLElement,
): void {
  container.replaceChildren();
  const scene = controller.scene;
  if (!scene) return;
  for (const [id, obj] of Object.entries(scene.objects)) {
    const box = el("fieldset", "entity");
    box.append(el("legend", "", `${id} (${obj.kind})`));
    const t = obj.transform.translate.slice();
    ["x", "y", "z"].forEach((axis, k) => {
      box.append(
        slider(`move ${axis}`, t[k], t[k] - 2, t[k] + 2, 0.01, (v) => {
          const translate = obj.transform.translate.slice();
          translate[k] = v;
          void controller.editObject(id, { translate });
        }),
      );
    });
    container.append(box);
  }
}

export function paintFrame(
  canvas: HTMLCanvasElement,
  image: { width: number; height: number; pixels: Uint8Array },
): void {
  canvas.width = image.width;
  canvas.height = image.height;
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const rgba = new Uint8ClampedArray(image.width * image.height * 4);
  for (let i = 0; i < image.width * image.height; i++) {
    rgba[4 * i] = image.pixels[3 * i];
    rgba[4 * i + 1] = image.pixels[3 * i + 1];
    rgba[4 * i + 2] = image.pixels[3 * i + 2];
    rgba[4 * i + 3] = 255;
  }
  ctx.putImageData(new ImageData(rgba, image.width, image.height), 0, 0);
}
