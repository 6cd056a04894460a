/**
 * Annotation tool: original image on the left, clickable panoptic overlay
 * on the right. Clicking a segment toggles its salient flag; submit posts
 * the selection and advances to the next unfinished image.
 *
 * Keyboard: ArrowRight/ArrowLeft switch image, z undoes the last toggle,
 * Enter submits.
 */

import { AnnotationApi, ApiError } from "./api";
import {
  SelectionState,
  acknowledge,
  decodeIdRaster,
  fromServer,
  hitSegment,
  pendingIds,
  renderOverlay,
  sortedLocal,
  toggle,
} from "./segments";
import type { ImageTask, SegmentMeta } from "./types";

const api = new AnnotationApi("");

interface Loaded {
  task: ImageTask;
  ids: Int32Array;
  segments: SegmentMeta[];
  image: HTMLImageElement;
  raster: HTMLImageElement;
}

let tasks: ImageTask[] = [];
let index = 0;
let current: Loaded | null = null;
let selection: SelectionState = fromServer([]);
let undoStack: number[] = [];

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function status(text: string, isError = false): void {
  const banner = el<HTMLDivElement>("status");
  banner.textContent = text;
  banner.className = isError ? "status error" : "status";
}

function progressText(): string {
  const done = tasks.filter((t) => t.done).length;
  return `${done} / ${tasks.length} done`;
}

async function loadImageElement(url: string): Promise<HTMLImageElement> {
  return new Promise((resolve, reject) => {
    const img = new Image();
    img.onload = () => resolve(img);
    img.onerror = () => reject(new Error(`failed to load ${url}`));
    img.src = url;
  });
}

function drawAll(): void {
  if (!current) return;
  const { task, ids, segments, image, raster } = current;
  const imageCanvas = el<HTMLCanvasElement>("image-canvas");
  const overlayCanvas = el<HTMLCanvasElement>("overlay-canvas");
  for (const canvas of [imageCanvas, overlayCanvas]) {
    canvas.width = task.width;
    canvas.height = task.height;
  }
  imageCanvas.getContext("2d")!.drawImage(image, 0, 0);
  const ctx = overlayCanvas.getContext("2d")!;
  ctx.drawImage(raster, 0, 0);
  const overlay = renderOverlay(ids, task.width, task.height, selection, segments);
  const frame = ctx.createImageData(task.width, task.height);
  frame.data.set(overlay);
  ctx.putImageData(frame, 0, 0);

  el<HTMLSpanElement>("progress").textContent = progressText();
  const bar = el<HTMLProgressElement>("progress-bar");
  bar.max = tasks.length || 1;
  bar.value = tasks.filter((t) => t.done).length;
  el<HTMLSpanElement>("image-name").textContent =
    `${task.id} (${index + 1}/${tasks.length})`;
  const pending = pendingIds(selection);
  el<HTMLSpanElement>("selection-info").textContent =
    `selected: [${sortedLocal(selection).join(", ")}]` +
    (pending.length ? ` (unsent changes: ${pending.length})` : "");
  renderSegmentList();
}

function renderSegmentList(): void {
  if (!current) return;
  const list = el<HTMLUListElement>("segment-list");
  list.innerHTML = "";
  for (const seg of current.segments) {
    const item = document.createElement("li");
    const swatch = document.createElement("span");
    swatch.className = "swatch";
    swatch.style.backgroundColor = `rgb(${seg.color.join(",")})`;
    item.appendChild(swatch);
    item.appendChild(
      document.createTextNode(` ${seg.id} ${seg.category} (${seg.pixel_count}px)`),
    );
    if (selection.local.has(seg.id)) item.classList.add("selected");
    item.onclick = () => toggleSegment(seg.id);
    list.appendChild(item);
  }
}

function toggleSegment(id: number): void {
  selection = toggle(selection, id);
  undoStack.push(id);
  status(selection.local.has(id) ? `segment ${id} selected` : `segment ${id} cleared`);
  drawAll();
}

function canvasClick(event: MouseEvent): void {
  if (!current) return;
  const canvas = event.currentTarget as HTMLCanvasElement;
  const rect = canvas.getBoundingClientRect();
  const x = ((event.clientX - rect.left) / rect.width) * canvas.width;
  const y = ((event.clientY - rect.top) / rect.height) * canvas.height;
  const id = hitSegment(current.ids, canvas.width, canvas.height, x, y);
  if (id === null) return;
  if (id === 0) {
    status("void area: nothing to select");
    return;
  }
  toggleSegment(id);
}

function undo(): void {
  const id = undoStack.pop();
  if (id === undefined) {
    status("nothing to undo");
    return;
  }
  selection = toggle(selection, id);
  status(`undid toggle of segment ${id}`);
  drawAll();
}

async function open(i: number): Promise<void> {
  if (!tasks.length) return;
  index = ((i % tasks.length) + tasks.length) % tasks.length;
  const task = tasks[index];
  const [meta, acked, image, raster] = await Promise.all([
    api.panoptic(task.id),
    api.selection(task.id),
    loadImageElement(api.imageUrl(task.id)),
    loadImageElement(api.rasterUrl(task.id)),
  ]);
  const scratch = document.createElement("canvas");
  scratch.width = task.width;
  scratch.height = task.height;
  const ctx = scratch.getContext("2d")!;
  ctx.drawImage(raster, 0, 0);
  const pixels = ctx.getImageData(0, 0, task.width, task.height).data;
  current = {
    task,
    ids: decodeIdRaster(pixels, task.width, task.height),
    segments: meta.segments,
    image,
    raster,
  };
  selection = fromServer(acked);
  undoStack = [];
  status(`opened ${task.id}`);
  drawAll();
}

async function submit(): Promise<void> {
  if (!current) return;
  const annotator = el<HTMLInputElement>("annotator").value.trim();
  if (!annotator) {
    status("enter an annotator name first", true);
    return;
  }
  try {
    await api.submitSelection(current.task.id, {
      segments: sortedLocal(selection),
      annotator,
    });
  } catch (err) {
    if (err instanceof ApiError) {
      status(`rejected: ${JSON.stringify(err.body)}`, true);
      return; // selection stays local for correction
    }
    throw err;
  }
  selection = acknowledge(selection);
  tasks[index] = { ...current.task, done: true };
  status(`saved ${current.task.id}`);
  const next = tasks.findIndex((t) => !t.done);
  if (next >= 0) {
    await open(next);
  } else {
    drawAll();
    status("all images done");
  }
}

function bind(): void {
  el<HTMLCanvasElement>("image-canvas").addEventListener("click", canvasClick);
  el<HTMLCanvasElement>("overlay-canvas").addEventListener("click", canvasClick);
  el<HTMLButtonElement>("prev").onclick = () => void open(index - 1);
  el<HTMLButtonElement>("next").onclick = () => void open(index + 1);
  el<HTMLButtonElement>("undo").onclick = undo;
  el<HTMLButtonElement>("submit").onclick = () => void submit();
  document.addEventListener("keydown", (event) => {
    if ((event.target as HTMLElement).tagName === "INPUT") return;
    if (event.key === "ArrowRight") void open(index + 1);
    else if (event.key === "ArrowLeft") void open(index - 1);
    else if (event.key === "z") undo();
    else if (event.key === "Enter") void submit();
  });
}

async function start(): Promise<void> {
  bind();
  tasks = await api.listImages();
  const first = tasks.findIndex((t) => !t.done);
  await open(first >= 0 ? first : 0);
}

start().catch((err) => status(String(err), true));
