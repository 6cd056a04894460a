export interface ImageTask {
  id: string;
  width: number;
  height: number;
  done: boolean;
}

export interface SegmentMeta {
  id: number;
  category: string;
  pixel_count: number;
  color: [number, number, number];
}

export interface PanopticMeta {
  segments: SegmentMeta[];
  raster_url: string;
}

export interface SelectionBody {
  segments: number[];
  annotator: string;
}
