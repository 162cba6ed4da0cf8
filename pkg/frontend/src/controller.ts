/**
 * Viewer state machine: connection, per-entity edit coalescing, and the
 * single-outstanding frame poll loop.
 *
 * Edits funnel through one queue per entity: while a PATCH for an entity is
 * in flight, newer values for it coalesce into a single pending body that is
 * sent when the in-flight request settles. Camera orbits use the same
 * mechanism, so at most one camera PATCH is ever outstanding.
 */

import {
  DecompositionResult,
  FrameResult,
  SceneDocument,
  ServiceClient,
} from "./api.js";

export type ConnectionState = "idle" | "connecting" | "connected" | "error";

interface PendingEdit {
  section: "lights" | "objects" | "materials" | "camera";
  id: string;
  body: Record<string, unknown>;
}

export interface OrbitState {
  azimuthDeg: number;
  elevationDeg: number;
  radius: number;
  target: number[];
}

export class ViewerController {
  state: ConnectionState = "idle";
  lastError: string | null = null;
  scene: SceneDocument | null = null;
  frameCount = 0;
  lastFrameIndex = -1;

  private inflight = new Map<string, Promise<void>>();
  private pending = new Map<string, PendingEdit>();
  private polling = false;
  private pollPromise: Promise<void> | null = null;
  private frameInFlight = false;

  constructor(readonly client: ServiceClient) {}

  /** Fetch the scene and populate panel state; safe to call again to retry. */
  async connect(): Promise<boolean> {
    this.state = "connecting";
    this.lastError = null;
    try {
      this.scene = await this.client.getScene();
      this.state = "connected";
      return true;
    } catch (err) {
      this.state = "error";
      this.lastError = err instanceof Error ? err.message : String(err);
      return false;
    }
  }

  get canRetry(): boolean {
    return this.state === "error";
  }

  // -- edits ---------------------------------------------------------------

  editLight(id: string, patch: Record<string, unknown>): Promise<void> {
    return this.queueEdit({ section: "lights", id, body: patch });
  }

  editMaterial(id: string, patch: Record<string, unknown>): Promise<void> {
    return this.queueEdit({ section: "materials", id, body: patch });
  }

  editObject(id: string, transform: Record<string, unknown>): Promise<void> {
    return this.queueEdit({
      section: "objects",
      id,
      body: { transform },
    });
  }

  orbitCamera(orbit: OrbitState): Promise<void> {
    const az = (orbit.azimuthDeg * Math.PI) / 180;
    const el = (orbit.elevationDeg * Math.PI) / 180;
    const t = orbit.target;
    const position = [
      t[0] + orbit.radius * Math.cos(el) * Math.sin(az),
      t[1] + orbit.radius * Math.sin(el),
      t[2] - orbit.radius * Math.cos(el) * Math.cos(az),
    ];
    return this.queueEdit({
      section: "camera",
      id: "",
      body: { position, look_at: t },
    });
  }

  /** Outstanding PATCH count for an entity; never exceeds one. */
  inflightEdits(section: string, id: string): number {
    return this.inflight.has(`${section}/${id}`) ? 1 : 0;
  }

  private queueEdit(edit: PendingEdit): Promise<void> {
    const key = `${edit.section}/${edit.id}`;
    const existing = this.pending.get(key);
    if (existing) {
      // coalesce: newest value per field wins
      existing.body = { ...existing.body, ...edit.body };
    } else {
      this.pending.set(key, { ...edit, body: { ...edit.body } });
    }
    if (!this.inflight.has(key)) {
      this.inflight.set(key, this.drainEdits(key));
    }
    return this.inflight.get(key)!;
  }

  private async drainEdits(key: string): Promise<void> {
    try {
      for (;;) {
        const next = this.pending.get(key);
        if (!next) return;
        this.pending.delete(key);
        try {
          if (next.section === "camera") {
            await this.client.patchCamera(next.body);
            if (this.scene) {
              Object.assign(this.scene.camera, next.body);
            }
          } else {
            await this.client.patchEntity(next.section, next.id, next.body);
            this.applyLocal(next);
          }
        } catch (err) {
          this.lastError = err instanceof Error ? err.message : String(err);
        }
      }
    } finally {
      this.inflight.delete(key);
    }
  }

  private applyLocal(edit: PendingEdit): void {
    if (!this.scene) return;
    if (edit.section === "lights" && this.scene.lights[edit.id]) {
      Object.assign(this.scene.lights[edit.id], edit.body);
    } else if (edit.section === "materials" && this.scene.materials[edit.id]) {
      Object.assign(this.scene.materials[edit.id], edit.body);
    } else if (edit.section === "objects" && this.scene.objects[edit.id]) {
      const t = (edit.body as { transform?: Record<string, unknown> }).transform;
      if (t) Object.assign(this.scene.objects[edit.id].transform, t);
    }
  }

  /** Resolves when every queued edit has been sent. */
  async editsSettled(): Promise<void> {
    while (this.inflight.size > 0) {
      await Promise.all([...this.inflight.values()]);
    }
  }

  // -- frames ----------------------------------------------------------------

  /** One frame; guarded so only a single request is ever outstanding. */
  async pollFrame(quality: "preview" | "converged" = "preview"): Promise<FrameResult> {
    if (this.frameInFlight) {
      throw new Error("a frame request is already in flight");
    }
    this.frameInFlight = true;
    try {
      const frame = await this.client.requestFrame(quality);
      this.frameCount++;
      this.lastFrameIndex = frame.index;
      return frame;
    } finally {
      this.frameInFlight = false;
    }
  }

  /** Continuous preview polling; one request at a time. */
  startLoop(onFrame: (frame: FrameResult) => void): void {
    if (this.polling) return;
    this.polling = true;
    this.pollPromise = (async () => {
      while (this.polling) {
        try {
          onFrame(await this.pollFrame());
        } catch (err) {
          this.lastError = err instanceof Error ? err.message : String(err);
          await new Promise((r) => setTimeout(r, 250));
        }
      }
    })();
  }

  async stopLoop(): Promise<void> {
    this.polling = false;
    if (this.pollPromise) {
      await this.pollPromise;
      this.pollPromise = null;
    }
  }

  async requestConverged(): Promise<FrameResult> {
    return this.pollFrame("converged");
  }

  async fetchDecomposition(): Promise<DecompositionResult> {
    if (this.frameInFlight) {
      throw new Error("a frame request is already in flight");
    }
    this.frameInFlight = true;
    try {
      const result = await this.client.requestDecomposition();
      this.frameCount++;
      this.lastFrameIndex = result.index;
      return result;
    } finally {
      this.frameInFlight = false;
    }
  }
}
