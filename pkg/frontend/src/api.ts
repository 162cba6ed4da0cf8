/**
 * HTTP client for the renderer's control plane.
 *
 * Every request the viewer makes goes through this client and lands in its
 * request log, so tests can verify the UI never touches anything beyond the
 * documented endpoints.
 */

export interface SceneCamera {
  position: number[];
  look_at: number[];
  up: number[];
  fov_deg: number;
  resolution: number[];
}

export interface LightEntry {
  type: string;
  radiance?: number[];
  direction?: number[];
  corner?: number[];
  edge_u?: number[];
  edge_v?: number[];
  color?: number[];
  two_sided?: boolean;
}

export interface ObjectEntry {
  kind: string;
  count?: number;
  triangles?: number;
  transform: { translate: number[]; rotate: number[]; scale: number };
}

export interface MaterialEntry {
  albedo?: number[];
  roughness?: number;
  emission?: number[];
}

export interface SceneDocument {
  camera: SceneCamera;
  lights: Record<string, LightEntry>;
  objects: Record<string, ObjectEntry>;
  materials: Record<string, MaterialEntry>;
}

export interface FrameResult {
  index: number;
  ppm: Uint8Array;
}

export interface DecompositionResult {
  index: number;
  /** base64 float32 PFM blobs: emission/direct/indirect/glossy/composite */
  layers: Record<string, string>;
}

export interface RequestLogEntry {
  method: string;
  path: string;
  startedAt: number;
  endedAt: number;
  status: number;
}

export type FetchLike = (
  input: string,
  init?: {
    method?: string;
    headers?: Record<string, string>;
    body?: string;
  },
) => Promise<{
  status: number;
  ok: boolean;
  headers: { get(name: string): string | null };
  arrayBuffer(): Promise<ArrayBuffer>;
  json(): Promise<unknown>;
  text(): Promise<string>;
}>;

export class ServiceError extends Error {
  constructor(
    public status: number,
    message: string,
  ) {
    super(message);
  }
}

export class ServiceClient {
  readonly log: RequestLogEntry[] = [];
  private seq = 0;

  constructor(
    public baseUrl: string,
    private fetchImpl: FetchLike = fetch as unknown as FetchLike,
  ) {}

  private async request(
    method: string,
    path: string,
    body?: unknown,
  ): Promise<{ status: number; headers: { get(n: string): string | null }; buffer: ArrayBuffer }> {
    const entry: RequestLogEntry = {
      method,
      path,
      startedAt: this.seq++,
      endedAt: -1,
      status: 0,
    };
    this.log.push(entry);
    const resp = await this.fetchImpl(this.baseUrl + path, {
      method,
      headers: { "Content-Type": "application/json" },
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    const buffer = await resp.arrayBuffer();
    entry.endedAt = this.seq++;
    entry.status = resp.status;
    if (!resp.ok) {
      let message = `HTTP ${resp.status}`;
      try {
        const parsed = JSON.parse(new TextDecoder().decode(buffer));
        if (parsed && typeof parsed.error === "string") message = parsed.error;
      } catch {
        /* non-JSON error body */
      }
      throw new ServiceError(resp.status, message);
    }
    return { status: resp.status, headers: resp.headers, buffer };
  }

  async getScene(): Promise<SceneDocument> {
    const { buffer } = await this.request("GET", "/scene");
    return JSON.parse(new TextDecoder().decode(buffer)) as SceneDocument;
  }

  async patchEntity(
    section: "lights" | "objects" | "materials",
    id: string,
    body: unknown,
  ): Promise<void> {
    await this.request("PATCH", `/scene/${section}/${id}`, body);
  }

  async patchCamera(body: unknown): Promise<void> {
    await this.request("PATCH", "/scene/camera", body);
  }

  async requestFrame(quality: "preview" | "converged" = "preview"): Promise<FrameResult> {
    const { headers, buffer } = await this.request("POST", "/frame", { quality });
    return {
      index: Number(headers.get("X-Frame-Index") ?? -1),
      ppm: new Uint8Array(buffer),
    };
  }

  async requestDecomposition(
    quality: "preview" | "converged" = "preview",
  ): Promise<DecompositionResult> {
    const { buffer } = await this.request("POST", "/frame", {
      quality,
      decompose: true,
    });
    const doc = JSON.parse(new TextDecoder().decode(buffer)) as {
      frame_index: number;
      layers: Record<string, string>;
    };
    return { index: doc.frame_index, layers: doc.layers };
  }
}
