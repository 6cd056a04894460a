/** Typed client for the annotation HTTP API. */

import type { ImageTask, PanopticMeta, SelectionBody } from "./types";

export class ApiError extends Error {
  constructor(
    public status: number,
    public body: unknown,
  ) {
    super(`API error ${status}`);
  }
}

async function getJson<T>(url: string): Promise<T> {
  const resp = await fetch(url);
  if (!resp.ok) throw new ApiError(resp.status, await resp.text());
  return (await resp.json()) as T;
}

export class AnnotationApi {
  constructor(private base: string = "") {}

  listImages(): Promise<ImageTask[]> {
    return getJson(`${this.base}/api/images`);
  }

  imageUrl(id: string): string {
    return `${this.base}/api/images/${id}`;
  }

  rasterUrl(id: string): string {
    return `${this.base}/api/images/${id}/raster`;
  }

  panoptic(id: string): Promise<PanopticMeta> {
    return getJson(`${this.base}/api/images/${id}/panoptic`);
  }

  async selection(id: string): Promise<number[]> {
    const body = await getJson<{ segments: number[] }>(`${this.base}/api/images/${id}/selection`);
    return body.segments;
  }

  async submitSelection(id: string, body: SelectionBody): Promise<void> {
    const resp = await fetch(`${this.base}/api/images/${id}/selection`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
    if (resp.status !== 204) {
      let payload: unknown;
      try {
        payload = await resp.json();
      } catch {
        payload = await resp.text();
      }
      throw new ApiError(resp.status, payload);
    }
  }

  export(): Promise<{ exported: number; unresolved: string[] }> {
    return getJson(`${this.base}/api/export`);
  }
}
